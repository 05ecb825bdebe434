"""Shared fixtures and independent oracles.

The oracles here are deliberately naive (explicit loops, float64) and never
call into the code under test beyond building inputs.
"""
from __future__ import annotations

import numpy as np
import pytest

from densekit.autodiff import Tape, Tensor, precision, record
from densekit.plan import ArchConfig

FD_STEP = 1e-3
FD_TOL = 1e-3


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-4, np.abs(a) + np.abs(n))


def probe(y: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(y * weights) with a constant weighting; turns any output into a loss."""
    out = Tensor(np.sum(y.data * weights))
    return record("probe", (y,), out, lambda g: (g * weights,))


def gradient_check(fn, arrays: dict, h: float = FD_STEP) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tensors)`` must return a scalar Tensor; ``arrays`` maps names to
    float64 arrays that are wrapped as gradient-requiring leaves.
    """
    with precision(np.float64):
        leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
        with Tape() as tape:
            loss = fn(leaves)
            tape.backward(loss)
        worst = 0.0
        for name, leaf in leaves.items():
            analytic = leaf.grad
            numeric = np.zeros_like(arrays[name])
            for idx in np.ndindex(arrays[name].shape):
                vals = []
                for sign in (1, -1):
                    pert = {k: v.copy() for k, v in arrays.items()}
                    pert[name][idx] += sign * h
                    vals.append(fn({k: Tensor(v) for k, v in pert.items()}).item())
                numeric[idx] = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, float(rel_error(analytic, numeric).max()))
    return worst


def conv_direct(x, w, stride, pad):
    """Six nested loops of cross-correlation in float64."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def away_from_zero(rng, shape, margin=0.1):
    """Values with |v| >= margin, so kinks (ReLU, max) are never straddled by FD steps."""
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """One dense block of two layers, growth 2, on 8x8 inputs."""
    return ArchConfig(depth_L=4, growth_k=2, block_layers=(2,), input_size=8)


@pytest.fixture
def small_config():
    """Smallest standard three-block plain DenseNet (one layer per block)."""
    return ArchConfig(depth_L=7, growth_k=4)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
