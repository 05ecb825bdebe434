"""Tensor container and the operation tape used for reverse-mode differentiation.

Primitives (see :mod:`densekit.ops`) compute their forward result with numpy and,
when a :class:`Tape` is active and any input requires a gradient, append a
:class:`Node` holding a backward closure.  ``Tape.backward`` then walks the nodes
in reverse execution order and accumulates gradients additively.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, UsageError

DTYPE = np.float32

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", DTYPE)


@contextmanager
def precision(dtype):
    """Temporarily build tensors in ``dtype`` (float64 is used by gradient checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """An n-dimensional float32 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        tape = current_tape()
        if tape is None:
            raise UsageError("backward() needs the tape that recorded this tensor")
        tape.backward(self)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives executed inside the block are recorded.
    Nodes are appended in execution order, so every node's inputs were produced
    by earlier nodes (or are leaves).
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise UsageError(
                    f"backward() needs a scalar loss, got shape {loss.shape}"
                )
            grad = np.ones_like(loss.data)
        pending = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        owned = set()
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.output))
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            g_ins = node.backward(g_out)
            for t, g in zip(node.inputs, g_ins):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in pending:
                    pending[key] = g
                elif key in owned:
                    pending[key] += g
                else:
                    pending[key] = pending[key] + g
                    owned.add(key)
        # whatever is left over belongs to leaves
        leaves = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = pending.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> Tensor:
    """Attach ``backward`` to ``output`` on the active tape if any input needs it."""
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward)
    return output


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(t: Tensor, op: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise ConfigError(f"{op} produced non-finite values")
