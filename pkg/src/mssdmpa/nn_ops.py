"""Structured differentiable ops: convolution family, batch norm, resampling.

Convolutions run as grouped batched matmuls over an im2col layout; the column
transform itself is a handful of strided slice copies, and its exact adjoint
(col2im) gives input gradients and the transposed convolution.  All ops accept
(C,H,W) or (N,C,H,W) tensors and preserve the input dtype so the same code
serves float32 training and float64 verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _make_result, _needs_grad, register_op


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution: square kernel, stride, zero-padding, dilation, groups."""

    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel < 1:
            raise ShapeError(f"kernel={self.kernel} must be >= 1")
        if self.stride < 1:
            raise ShapeError(f"stride={self.stride} must be >= 1")
        if self.padding < 0:
            raise ShapeError(f"padding={self.padding} must be >= 0")
        if self.dilation < 1:
            raise ShapeError(f"dilation={self.dilation} must be >= 1")
        if self.groups < 1:
            raise ShapeError(f"groups={self.groups} must be >= 1")


def conv_out_dim(extent: int, spec: ConvSpec) -> int:
    """Output extent of a convolution along one spatial axis (floor rule)."""
    span = spec.dilation * (spec.kernel - 1) + 1
    return (extent + 2 * spec.padding - span) // spec.stride + 1


def _as4d(data: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if data.ndim == 3:
        return data[None], True
    if data.ndim == 4:
        return data, False
    raise ShapeError(f"{name} must be 3-D (C,H,W) or 4-D (N,C,H,W), got {data.ndim}-D")


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, C, k, k, ho, wo) window extraction; channel-major rows."""
    n, c = xp.shape[:2]
    k, s, d = spec.kernel, spec.stride, spec.dilation
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a * d : a * d + (ho - 1) * s + 1 : s, b * d : b * d + (wo - 1) * s + 1 : s]
    return cols


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Exact adjoint of :func:`_im2col`: scatter-add windows back onto the padded plane."""
    k, s, d = spec.kernel, spec.stride, spec.dilation
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            xp[:, :, a * d : a * d + (ho - 1) * s + 1 : s, b * d : b * d + (wo - 1) * s + 1 : s] += cols[:, :, a, b]
    return xp


def _check_conv_channels(c_in: int, c_out: int, spec: ConvSpec) -> None:
    if c_in % spec.groups:
        raise ShapeError(f"input channels C_in={c_in} not divisible by groups={spec.groups}")
    if c_out % spec.groups:
        raise ShapeError(f"output channels C_out={c_out} not divisible by groups={spec.groups}")


@register_op("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Grouped 2-D convolution of ``x`` with ``weight`` (C_out, C_in/groups, k, k)."""
    x4, squeeze = _as4d(x.data, "conv2d input")
    n, c_in, h, w = x4.shape
    c_out, c_in_g, kh, kw = weight.shape
    if kh != spec.kernel or kw != spec.kernel:
        raise ShapeError(f"weight kernel {kh}x{kw} does not match spec kernel={spec.kernel}")
    _check_conv_channels(c_in, c_out, spec)
    if c_in_g != c_in // spec.groups:
        raise ShapeError(f"weight expects C_in/groups={c_in_g}, input gives {c_in // spec.groups}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} must be ({c_out},)")
    ho, wo = conv_out_dim(h, spec), conv_out_dim(w, spec)
    if ho < 1:
        raise ShapeError(f"zero-size output: H_out={ho} from H_in={h} with {spec}")
    if wo < 1:
        raise ShapeError(f"zero-size output: W_out={wo} from W_in={w} with {spec}")

    g = spec.groups
    og, ck = c_out // g, c_in_g * spec.kernel * spec.kernel
    cols = _im2col(_pad2d(x4, spec.padding), spec, ho, wo).reshape(n, g, ck, ho * wo)
    wm = weight.data.reshape(g, og, ck)
    out = np.matmul(wm[None], cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out = out[0]

    def vjp(gout):
        g4 = gout[None] if squeeze else gout
        gy = g4.reshape(n, g, og, ho * wo)
        dx = None
        if _needs_grad(x):
            dcols = np.matmul(wm.swapaxes(-1, -2)[None], gy).reshape(n, c_in, spec.kernel, spec.kernel, ho, wo)
            dxp = _col2im(dcols, (n, c_in, h + 2 * spec.padding, w + 2 * spec.padding), spec, ho, wo)
            p = spec.padding
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
            if squeeze:
                dx = dx[0]
        dw = None
        if _needs_grad(weight):
            cols_b = _im2col(_pad2d(x4, spec.padding), spec, ho, wo).reshape(n, g, ck, ho * wo)
            dw = np.matmul(gy, cols_b.swapaxes(-1, -2)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g4.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make_result(out, parents, vjp)


@register_op("transposed_conv2d")
def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is (C_in, C_out/groups, k, k).

    Sharing the weight array and spec with a conv2d gives the exact
    inner-product identity <conv2d(u), v> == <u, transposed_conv2d(v)>.
    """
    x4, squeeze = _as4d(x.data, "transposed_conv2d input")
    n, c_in, hi, wi = x4.shape
    wc_in, c_out_g, kh, kw = weight.shape
    if kh != spec.kernel or kw != spec.kernel:
        raise ShapeError(f"weight kernel {kh}x{kw} does not match spec kernel={spec.kernel}")
    if wc_in != c_in:
        raise ShapeError(f"weight expects C_in={wc_in}, input gives {c_in}")
    c_out = c_out_g * spec.groups
    _check_conv_channels(c_in, c_out, spec)
    span = spec.dilation * (spec.kernel - 1) + 1
    ho = (hi - 1) * spec.stride - 2 * spec.padding + span
    wo = (wi - 1) * spec.stride - 2 * spec.padding + span
    if ho < 1 or wo < 1:
        raise ShapeError(f"zero-size output: H_out={ho}, W_out={wo} from ({hi},{wi}) with {spec}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} must be ({c_out},)")

    g = spec.groups
    ig, ok = c_in // g, c_out_g * spec.kernel * spec.kernel
    wm = weight.data.reshape(g, ig, ok)
    xg = x4.reshape(n, g, ig, hi * wi)
    cols = np.matmul(wm.swapaxes(-1, -2)[None], xg).reshape(n, c_out, spec.kernel, spec.kernel, hi, wi)
    p = spec.padding
    padded = _col2im(cols, (n, c_out, ho + 2 * p, wo + 2 * p), spec, hi, wi)
    out = padded[:, :, p : p + ho, p : p + wo] if p else padded
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out = out[0]

    def vjp(gout):
        g4 = gout[None] if squeeze else gout
        gcols = _im2col(_pad2d(g4, p), spec, hi, wi).reshape(n, g, ok, hi * wi)
        dx = None
        if _needs_grad(x):
            dx = np.matmul(wm[None], gcols).reshape(x4.shape)
            if squeeze:
                dx = dx[0]
        dw = None
        if _needs_grad(weight):
            dw = np.matmul(xg, gcols.swapaxes(-1, -2)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g4.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make_result(out, parents, vjp)


@register_op("batch_norm")
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization with affine transform.

    Train mode normalizes by biased batch statistics and updates the running
    buffers in place; eval mode normalizes by the running buffers.  Batch
    size 1 is allowed in train mode (statistics still cover H and W).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x4, squeeze = _as4d(x.data, "batch_norm input")
    c = x4.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    count = x4.shape[0] * x4.shape[2] * x4.shape[3]

    if mode == "train":
        mean = x4.mean(axis=axes)
        var = x4.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x4.dtype)
        var = running_var.astype(x4.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x4 - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    if squeeze:
        out = out[0]

    def vjp(gout):
        g4 = gout[None] if squeeze else gout
        dgamma = (g4 * xhat).sum(axis=axes)
        dbeta = g4.sum(axis=axes)
        scale = (gamma.data * inv).reshape(1, c, 1, 1)
        if mode == "eval":
            dx = g4 * scale
        else:
            gm = g4.mean(axis=axes).reshape(1, c, 1, 1)
            gx = (g4 * xhat).sum(axis=axes).reshape(1, c, 1, 1) / count
            dx = scale * (g4 - gm - xhat * gx)
        return (dx[0] if squeeze else dx), dgamma, dbeta

    return _make_result(out, (x, gamma, beta), vjp)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """1-D linear interpolation matrix, half-pixel centers, border-clamped."""
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    r = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(r, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(r, (np.arange(n_out), i1), frac)
    return r.astype(dtype)


@register_op("bilinear_upsample")
def bilinear_upsample(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Bilinear upsampling to ``target`` = (H', W'); downsampling is rejected."""
    h, w = x.shape[-2], x.shape[-1]
    ho, wo = int(target[0]), int(target[1])
    if ho < h or wo < w:
        raise ShapeError(f"bilinear_upsample target ({ho},{wo}) smaller than input ({h},{w})")
    ry = _interp_matrix(h, ho, x.dtype)
    rx = _interp_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def vjp(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _make_result(out, (x,), vjp)


@register_op("global_avg_pool")
def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, keeping (…, C, 1, 1) shape."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs at least 3 dims, got {x.ndim}")
    h, w = x.shape[-2], x.shape[-1]
    out = x.data.mean(axis=(-2, -1), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype, copy=True),)

    return _make_result(out, (x,), vjp)


def _window_view(data: np.ndarray, k: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Reshape (…, H, W) into flattened non-overlapping k x k windows (…, h, w, k*k)."""
    h, w = data.shape[-2], data.shape[-1]
    if h % k:
        raise ShapeError(f"height {h} not divisible by window {k}")
    if w % k:
        raise ShapeError(f"width {w} not divisible by window {k}")
    lead = data.shape[:-2]
    win = data.reshape(*lead, h // k, k, w // k, k).swapaxes(-3, -2)
    return np.ascontiguousarray(win).reshape(*lead, h // k, w // k, k * k), lead


def _windows_to_plane(win: np.ndarray, k: int) -> np.ndarray:
    lead = win.shape[:-3]
    h, w = win.shape[-3], win.shape[-2]
    back = win.reshape(*lead, h, w, k, k).swapaxes(-3, -2)
    return np.ascontiguousarray(back).reshape(*lead, h * k, w * k)


@register_op("max_pool2d")
def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """k x k max pooling at stride k; gradient routes to the first argmax."""
    win, _ = _window_view(x.data, k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return (_windows_to_plane(dwin, k),)

    return _make_result(out, (x,), vjp)


@register_op("avg_pool2d")
def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """k x k average pooling at stride k."""
    win, _ = _window_view(x.data, k)
    out = win.mean(axis=-1)

    def vjp(g):
        dwin = np.broadcast_to(g[..., None] / (k * k), win.shape).astype(win.dtype, copy=True)
        return (_windows_to_plane(dwin, k),)

    return _make_result(out, (x,), vjp)


@register_op("stochastic_pool")
def stochastic_pool(x: Tensor, k: int = 2, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Stochastic pooling over k x k windows.

    Train mode samples one cell per window with probability proportional to
    its nonnegative activation; eval mode returns the probability-weighted
    average.  All-nonpositive windows pool to 0.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    win, _ = _window_view(x.data, k)
    pos = np.maximum(win, 0.0)
    z = pos.sum(axis=-1, keepdims=True)
    nonzero = z[..., 0] > 0

    if mode == "train":
        if rng is None:
            raise ValueError("stochastic_pool in train mode needs an rng")
        with np.errstate(invalid="ignore", divide="ignore"):
            prob = np.where(z > 0, pos / z, 0.0)
        cum = prob.cumsum(axis=-1)
        u = rng.random(size=win.shape[:-1])
        idx = (u[..., None] > cum).sum(axis=-1)
        np.minimum(idx, k * k - 1, out=idx)
        out = np.take_along_axis(pos, idx[..., None], axis=-1)[..., 0]
        out = np.where(nonzero, out, 0.0).astype(win.dtype)

        def vjp(g):
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[..., None], (g * nonzero)[..., None], axis=-1)
            dwin *= win > 0
            return (_windows_to_plane(dwin, k),)

    else:
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(nonzero, (pos * pos).sum(axis=-1) / z[..., 0], 0.0).astype(win.dtype)

        def vjp(g):
            with np.errstate(invalid="ignore", divide="ignore"):
                coef = np.where(z > 0, (2.0 * pos - out[..., None]) / z, 0.0)
            dwin = (g[..., None] * coef * (win > 0)).astype(win.dtype)
            return (_windows_to_plane(dwin, k),)

    return _make_result(out, (x,), vjp)
