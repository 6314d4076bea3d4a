"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps a row-major float array (float32 by default, float64
for verification runs) together with an optional gradient buffer and the
closure needed to propagate gradients to its parents.  Graphs are plain DAGs
of Tensors; ``backward()`` on a scalar root accumulates gradients into every
ancestor that has ``requires_grad`` set.

Thread model: a tensor is immutable after the op that produced it, except for
its ``grad`` buffer.  One graph belongs to one thread; independent graphs may
run concurrently.  The grad-enabled flag is thread-local for the same reason.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

# Names of every differentiable op built on _make_result; the gradient-audit
# suite asserts it covers each one.
DIFFERENTIABLE_OPS: set[str] = set()

_state = threading.local()

# Opt-in finiteness assertion after every forward op (debug builds).
CHECK_FINITE = os.environ.get("MSSDMPA_CHECK_FINITE", "") not in ("", "0")


def set_check_finite(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def register_op(name: str):
    """Mark a function as a differentiable op for audit-coverage accounting."""

    def deco(fn):
        DIFFERENTIABLE_OPS.add(name)
        fn.op_name = name
        return fn

    return deco


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{grad})"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has {self.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into every requires_grad ancestor.

        The root must be scalar.  Gradients add into existing ``grad``
        buffers, so two backward calls without ``zero_grad`` double them.
        """
        if self.size != 1:
            raise ShapeError(f"backward() root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def abs(self):
        return absolute(self)

    def log(self):
        return log(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


def _make_result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op output, attaching the vjp closure when gradients may flow."""
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a binary-op operand pair; plain scalars adopt the tensor's dtype."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


@register_op("add")
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make_result(out, (a, b), vjp)


@register_op("sub")
def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make_result(out, (a, b), vjp)


@register_op("mul")
def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def vjp(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make_result(out, (a, b), vjp)


@register_op("div")
def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_result(out, (a, b), vjp)


@register_op("neg")
def neg(a: Tensor) -> Tensor:
    return _make_result(-a.data, (a,), lambda g: (-g,))


@register_op("pow")
def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** p`` for scalar ``p``; safe at 0 for p >= 1."""
    p = float(exponent)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make_result(out, (a,), vjp)


@register_op("abs")
def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make_result(out, (a,), vjp)


@register_op("log")
def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make_result(out, (a,), vjp)


@register_op("clip")
def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through unclamped elements."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside.astype(g.dtype),)

    return _make_result(out, (a,), vjp)


@register_op("relu")
def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0).astype(g.dtype),)

    return _make_result(out, (a,), vjp)


@register_op("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, clamped one ulp inside (0,1) so saturation never reaches the endpoints."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make_result(out, (a,), vjp)


# -- reductions and shape ops ---------------------------------------------


@register_op("sum")
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g_ = g
        if not keepdims:
            g_ = np.expand_dims(g, axis)
        return (np.broadcast_to(g_, a.shape).copy(),)

    return _make_result(np.asarray(out), (a,), vjp)


@register_op("mean")
def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)
        g_ = g
        if not keepdims:
            g_ = np.expand_dims(g, axis)
        return (np.broadcast_to(g_ / count, a.shape).astype(a.dtype, copy=True),)

    return _make_result(np.asarray(out), (a,), vjp)


@register_op("reshape")
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make_result(out, (a,), vjp)


@register_op("concat")
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_result(out, tensors, vjp)
