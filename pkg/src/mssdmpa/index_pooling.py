"""Lossless index pooling: space-to-depth with one-hot kernel semantics.

Index pooling redistributes every pixel of a k x k window into k*k separate
channel slices.  It is mathematically the convolution of the input with k*k
binary kernels (each holding a single one at a distinct window position) at
stride k, but is implemented as a pure rearrangement: identical values, no
arithmetic.  The one-hot convolution stays available through
:func:`make_index_kernels` as an independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn_ops import ConvSpec, conv2d
from .tensor import Tensor, _make_result, register_op


@dataclass(frozen=True)
class IndexKernelSet:
    """The k*k one-hot k x k kernels, in raster order (0,0),(0,1),...,(k-1,k-1)."""

    k: int
    kernels: np.ndarray  # (k*k, k, k) float32, each summing to exactly 1


def make_index_kernels(k: int) -> IndexKernelSet:
    """Build the one-hot kernel set; kernel q has its one at (q // k, q % k)."""
    if k < 1:
        raise ShapeError(f"window size k={k} must be >= 1")
    kernels = np.zeros((k * k, k, k), dtype=np.float32)
    for q in range(k * k):
        kernels[q, q // k, q % k] = 1.0
    return IndexKernelSet(k=k, kernels=kernels)


def pooled_dims(h_in: int, w_in: int, k: int, s: int, p, r: int = 1) -> tuple[int, int]:
    """Spatial output extents of a k x k convolution with stride s, padding p, dilation r.

    ``p`` may be a number (possibly half-integral, since only 2p enters the
    formula) or the string ``"ceil"``, which picks the per-axis padding
    (k * ceil(n/k) - n) / 2 that turns the floor rule into a ceil rule.
    """
    if h_in < 1 or w_in < 1 or k < 1 or s < 1 or r < 1:
        raise ShapeError(f"pooled_dims arguments must be positive, got ({h_in},{w_in},k={k},s={s},r={r})")

    def one(n: int) -> int:
        pad = (k * math.ceil(n / k) - n) / 2 if p == "ceil" else float(p)
        if pad < 0:
            raise ShapeError(f"padding {pad} must be >= 0")
        out = int(math.floor((n + 2 * pad - r * (k - 1) - 1) / s + 1))
        if out < 1:
            raise ShapeError(f"non-positive pooled extent {out} from input {n}")
        return out

    return one(h_in), one(w_in)


def _pool_axes_order(ndim: int) -> tuple[list[int], list[int]]:
    """Permutations between (..., C, h, a, w, b) and (..., a, b, C, h, w)."""
    lead = list(range(ndim - 5))
    fwd = lead + [ndim - 3, ndim - 1, ndim - 5, ndim - 4, ndim - 2]
    inv = [0] * ndim
    for i, ax in enumerate(fwd):
        inv[ax] = i
    return fwd, inv


def _index_pool_raw(data: np.ndarray, k: int) -> np.ndarray:
    c, h, w = data.shape[-3:]
    if h % k:
        raise ShapeError(f"height {h} not divisible by k={k}")
    if w % k:
        raise ShapeError(f"width {w} not divisible by k={k}")
    lead = data.shape[:-3]
    split = data.reshape(*lead, c, h // k, k, w // k, k)
    fwd, _ = _pool_axes_order(split.ndim)
    moved = split.transpose(fwd)
    return np.ascontiguousarray(moved).reshape(*lead, k * k, c, h // k, w // k)


def _index_unpool_raw(data: np.ndarray, k: int) -> np.ndarray:
    if data.ndim < 4:
        raise ShapeError(f"index_unpool input needs at least 4 dims, got {data.ndim}")
    q, c, h, w = data.shape[-4:]
    if q != k * k:
        raise ShapeError(f"leading slice extent {q} must equal k*k={k * k}")
    lead = data.shape[:-4]
    split = data.reshape(*lead, k, k, c, h, w)
    _, inv = _pool_axes_order(split.ndim)
    moved = split.transpose(inv)
    return np.ascontiguousarray(moved).reshape(*lead, c, h * k, w * k)


@register_op("index_pool")
def index_pool(x: Tensor, k: int) -> Tensor:
    """(…, C, H, W) -> (…, k*k, C, H/k, W/k), slice q holding window offset (q//k, q%k).

    Bit-exact rearrangement; the inverse is :func:`index_unpool`.
    """
    out = _index_pool_raw(x.data, k)

    def vjp(g):
        return (_index_unpool_raw(g, k),)

    return _make_result(out, (x,), vjp)


@register_op("index_unpool")
def index_unpool(y: Tensor, k: int) -> Tensor:
    """Exact inverse of :func:`index_pool`: (…, k*k, C, h, w) -> (…, C, h*k, w*k)."""
    out = _index_unpool_raw(y.data, k)

    def vjp(g):
        return (_index_pool_raw(g, k),)

    return _make_result(out, (y,), vjp)


def depthwise_mix(y: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 depthwise convolution (one filter per channel), stride 1, padding 1."""
    channels = y.shape[-3]
    if weight.shape[0] != channels or weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be ({channels},1,3,3), got {weight.shape}")
    return conv2d(y, weight, bias, ConvSpec(kernel=3, stride=1, padding=1, groups=channels))


def delta_mix_weight(channels: int, dtype=np.float32) -> np.ndarray:
    """Centered-delta depthwise filters: depthwise_mix starts as the identity."""
    w = np.zeros((channels, 1, 3, 3), dtype=dtype)
    w[:, 0, 1, 1] = 1.0
    return w
