"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient and the
bookkeeping needed to replay the computation backwards: the tensors it was
computed from and a closure that routes an incoming output gradient to them.
Operations live in :mod:`multimod.ops`; they call :func:`make_node` and attach
the closure, so the graph is implicit in the tensors themselves.

Two global switches control numeric behaviour:

* precision -- float32 by default (training), float64 for verification.
  Switch with the :func:`precision` context manager.
* debug checks -- when enabled (``MULTIMOD_DEBUG=1`` or
  :func:`set_debug_checks`), every op output is checked for NaN/Inf.

Tensors are value-semantic and a graph is confined to one thread for the
duration of a forward/backward pass; independent graphs may run concurrently.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Optional

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_CHECKS = os.environ.get("MULTIMOD_DEBUG", "").strip() not in ("", "0")

_DTYPE_NAMES = {
    "float32": np.float32,
    "float64": np.float64,
    np.float32: np.float32,
    np.float64: np.float64,
}


def default_dtype():
    """Current default floating dtype for new leaf tensors."""
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    try:
        new = _DTYPE_NAMES[dtype]
    except KeyError:
        raise ValueError(f"unsupported precision {dtype!r}") from None
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = new
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checking of every op output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """N-dimensional float array, optionally tracked by the autograd graph.

    ``data`` is always a numpy float32/float64 array. ``grad`` is lazily
    allocated by :func:`backward` and always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array (shared, not copied)."""
        return self.data

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's data, cut from the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.grad is not None:
            flags.append("has_grad")
        tail = (", " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{tail})"


def make_node(data: np.ndarray, parents: Iterable[Tensor]) -> Tensor:
    """Create a graph node for an op output.

    Parents are only retained (and a backward closure expected) when grad
    recording is on and at least one parent requires grad; otherwise the
    result is a plain leaf, which keeps inference passes free of closures.
    """
    parents = tuple(parents)
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("op produced non-finite values (debug checks on)")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t._backward = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
    else:
        t.requires_grad = False
        t._parents = ()
    return t


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating a private copy on first touch)."""
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    visited.add(id(root))
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            child = node._parents[i]
            if id(child) not in visited:
                visited.add(id(child))
                stack.append((child, 0))
        else:
            order.append(node)
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with ``requires_grad``.

    ``root`` must be a scalar (size-1) output of a recorded graph. Each node
    is visited exactly once, in reverse topological order; gradients add up
    across fan-out.
    """
    if root.data.size != 1:
        raise ValueError(f"backward() requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward() on a tensor with no recorded graph")
    root.grad = np.ones_like(root.data)
    for node in reversed(_toposort(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
