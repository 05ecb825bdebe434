"""Differentiable primitives over NCHW float32 tensors.

Each function computes its result with numpy and registers a backward closure
on the active :class:`~densekit.autodiff.Tape`.  Convolutions are
cross-correlations without bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, check_finite, default_dtype, record
from .errors import ConfigError, DataError, UsageError

# Set to True to verify every forward result is finite.
DEBUG_CHECKS = False

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out(data: np.ndarray, op: str) -> Tensor:
    t = Tensor(data)
    if DEBUG_CHECKS:
        check_finite(t, op)
    return t


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ConfigError(f"{op} expects an N,C,H,W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    # floor semantics, so a 7x7/2 stem maps 224 -> 112
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ConfigError(
            f"window of size {kernel} with stride {stride} does not fit extent {size} "
            f"with padding {padding}"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw].

    The padded input is multiplied once by all kh*kw kernel slices, and the
    per-offset partial outputs are shift-added.  Memory traffic then scales
    with Cout rather than with Cin*kh*kw, which suits dense layers where the
    input is wide and the output is only ``k`` channels.
    """
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ConfigError(f"conv2d weight must be 4-D, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigError(
            f"conv2d channel mismatch: input shape {x.shape} vs weight shape {weight.shape}"
        )
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)

    if kh == 1 and kw == 1 and padding == 0:
        return _conv1x1(x, weight, stride, ho, wo)

    hp, wp = h + 2 * padding, w + 2 * padding
    xp = x.data
    if padding:
        xp = np.zeros((n, cin, hp, wp), dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    xp3 = xp.reshape(n, cin, hp * wp)
    # rows ordered (i, j, o)
    w_all = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(kh * kw * cout, cin)
    partial = np.matmul(w_all, xp3).reshape(n, kh, kw, cout, hp, wp)
    out = np.zeros((n, cout, ho, wo), dtype=default_dtype())
    for i in range(kh):
        for j in range(kw):
            out += partial[:, i, j, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    del partial
    y = _out(out, "conv2d")

    def backward(g):
        spread = np.zeros((n, kh, kw, cout, hp, wp), dtype=default_dtype())
        for i in range(kh):
            for j in range(kw):
                spread[:, i, j, :, i:i + stride * ho:stride, j:j + stride * wo:stride] = g
        spread = spread.reshape(n, kh * kw * cout, hp * wp)
        gw = gx = None
        if weight.requires_grad:
            gw_all = np.matmul(spread, xp3.transpose(0, 2, 1)).sum(axis=0)
            gw = np.ascontiguousarray(
                gw_all.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
            )
        if x.requires_grad:
            gxp = np.matmul(w_all.T, spread).reshape(n, cin, hp, wp)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return record("conv2d", (x, weight), y, backward)


def _conv1x1(x: Tensor, weight: Tensor, stride: int, ho: int, wo: int) -> Tensor:
    n, cin = x.shape[:2]
    cout = weight.shape[0]
    wmat = weight.data.reshape(cout, cin)
    xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
    x3 = np.ascontiguousarray(xs).reshape(n, cin, ho * wo)
    y = _out(np.matmul(wmat, x3).reshape(n, cout, ho, wo), "conv2d")

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        gw = gx = None
        if weight.requires_grad:
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gsub = np.matmul(wmat.T, g3).reshape(n, cin, ho, wo)
            if stride > 1:
                gx = np.zeros(x.shape, dtype=default_dtype())
                gx[:, :, ::stride, ::stride] = gsub
            else:
                gx = gsub
        return gx, gw

    return record("conv2d", (x, weight), y, backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean and (unbiased) running variance."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def _channel_sum(a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    n, c = a.shape[:2]
    a3 = a.reshape(n, c, -1)
    if b is None:
        return np.einsum("nch->c", a3)
    return np.einsum("nch,nch->c", a3, b.reshape(n, c, -1))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: Optional[RunningStats] = None,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize each channel over (N, H, W), then scale by gamma and shift by beta.

    In ``"train"`` mode batch statistics are used and ``running`` (if given)
    is updated in place; in ``"eval"`` mode ``running`` supplies the statistics.
    """
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(
            f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    dt = x.data.dtype
    m = n * h * w
    if mode == "train":
        if m < 2:
            raise DataError(f"batch_norm in train mode needs N*H*W >= 2, got {m}")
        mean = (_channel_sum(x.data) / m).astype(dt)
        xc = x.data - mean.reshape(1, c, 1, 1)
        var = (_channel_sum(xc, xc) / m).astype(dt)
        if running is not None:
            mom = running.momentum
            running.mean[...] = (1 - mom) * running.mean + mom * mean
            running.var[...] = (1 - mom) * running.var + mom * var * (m / (m - 1))
    elif mode == "eval":
        if running is None:
            raise UsageError("batch_norm in eval mode needs running statistics")
        mean, var = running.mean.astype(dt), running.var.astype(dt)
    else:
        raise ConfigError(f"unknown batch_norm mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    a = gamma.data * inv_std                    # y = a*x + b per channel
    if mode == "train":
        # reuse the centred buffer: y = a*(x - mean) + beta
        y = xc
        y *= a.reshape(1, c, 1, 1)
        y += beta.data.reshape(1, c, 1, 1)
        del xc
    else:
        y = x.data * a.reshape(1, c, 1, 1)
        y += (beta.data - mean * a).reshape(1, c, 1, 1)
    y = _out(y, "batch_norm")
    train = mode == "train"

    def backward(gy):
        sum_gy = _channel_sum(gy)
        # sum(gy * xhat) without materializing xhat
        sum_gy_xhat = (_channel_sum(gy, x.data) - mean * sum_gy) * inv_std
        ggamma = sum_gy_xhat if gamma.requires_grad else None
        gbeta = sum_gy if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            if train:
                coef_x = -a * inv_std * sum_gy_xhat / m
                const = -a * sum_gy / m - coef_x * mean
            else:
                coef_x = np.zeros_like(a)
                const = np.zeros_like(a)
            gx = gy * a.reshape(1, c, 1, 1)
            if train:
                gx += x.data * coef_x.reshape(1, c, 1, 1)
                gx += const.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return record("batch_norm", (x, gamma, beta), y, backward)


# ---------------------------------------------------------------------------
# elementwise and structural
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    y = _out(np.maximum(x.data, 0), "relu")
    return record("relu", (x,), y, lambda g: (g * (y.data > 0),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    y = _out(a.data + b.data, "add")
    return record("add", (a, b), y, lambda g: (g, g))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate N,C,H,W tensors along the channel axis in argument order."""
    if not inputs:
        raise ConfigError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigError(
                f"concat_channels input {i} has shape {t.shape}, incompatible with {ref}"
            )
    if len(inputs) == 1:
        y = _out(inputs[0].data.copy(), "concat_channels")
    else:
        y = _out(np.concatenate([t.data for t in inputs], axis=1), "concat_channels")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return record("concat_channels", tuple(inputs), y, backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    y = _out(np.asarray(x.data.sum(dtype=np.float64), dtype=default_dtype()), "sum")
    return record("sum", (x,), y, lambda g: (np.broadcast_to(g, x.shape).astype(default_dtype()),))


def scale(x: Tensor, factor: float) -> Tensor:
    y = _out(x.data * default_dtype()(factor), "scale")
    return record("scale", (x,), y, lambda g: (g * default_dtype()(factor),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = _out(x.data.reshape(shape), "reshape")
    return record("reshape", (x,), y, lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def avg_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    _require_4d(x, "avg_pool2d")
    n, c, h, w = x.shape
    if window != stride:
        raise ConfigError("avg_pool2d supports only non-overlapping windows (window == stride)")
    if h % stride or w % stride:
        raise ConfigError(f"avg_pool2d: extent {h}x{w} is not divisible by stride {stride}")
    ho, wo = h // stride, w // stride
    area = default_dtype()(window * window)
    # summing strided views is much faster than a mean over a 6-D reshape
    acc = x.data[:, :, 0::window, 0::window].copy()
    for i in range(window):
        for j in range(window):
            if i or j:
                acc += x.data[:, :, i::window, j::window]
    acc /= area
    y = _out(acc, "avg_pool2d")

    def backward(g):
        share = g / area
        gx = np.empty(x.shape, dtype=share.dtype)
        for i in range(window):
            for j in range(window):
                gx[:, :, i::window, j::window] = share
        return (gx,)

    return record("avg_pool2d", (x,), y, backward)


def max_pool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max over each window; ties route the gradient to the first row-major index."""
    _require_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    ho = conv_out_size(h, window, stride, padding)
    wo = conv_out_size(w, window, stride, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    y = _out(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], "max_pool2d")

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=default_dtype())
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + di
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dj
        nn_ = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        np.add.at(gxp, (nn_, cc, rows, cols), g)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx,)

    return record("max_pool2d", (x,), y, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    y = _out(x.data.mean(axis=(2, 3)), "global_avg_pool")

    def backward(g):
        return (np.broadcast_to((g / default_dtype()(h * w))[:, :, None, None], x.shape).astype(default_dtype()),)

    return record("global_avg_pool", (x,), y, backward)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for x [N,F], weight [K,F], bias [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ConfigError(
            f"linear dimension mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    y = _out(x.data @ weight.data.T + bias.data, "linear")

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record("linear", (x, weight, bias), y, backward)


def dropout(x: Tensor, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        y = _out(x.data.copy(), "dropout")
        return record("dropout", (x,), y, lambda g: (g,))
    if rng is None:
        raise UsageError("dropout in train mode needs a random generator")
    keep = default_dtype()(1.0 - rate)
    mask = (rng.random(x.shape) >= rate).astype(default_dtype()) / keep
    y = _out(x.data * mask, "dropout")
    return record("dropout", (x,), y, lambda g: (g * mask,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_with_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(labels[i])} at record {i} is outside [0, {k})")
    logp = log_softmax(logits.astype(np.float64))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad.astype(default_dtype())


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Scalar tensor holding the mean cross-entropy of ``logits`` [N,K] against ``labels``."""
    if logits.data.ndim != 2:
        raise ConfigError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    loss, grad = cross_entropy_with_grad(logits.data, labels)
    y = _out(np.asarray(loss, dtype=default_dtype()), "softmax_cross_entropy")
    return record("softmax_cross_entropy", (logits,), y, lambda g: (grad * g,))
