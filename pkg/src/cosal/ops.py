"""Neural-network primitives on top of the autodiff tensor.

Each op records a single OpNode; composite layers (linear + norm + gate)
live in nn.py. Backward closures re-read operand .data instead of caching
large intermediates (im2col buffers in particular), so tensor data must
not be mutated between a forward pass and its backward pass.

Convolutions lower to im2col + matmul one image at a time, which caps the
transient buffer at C*k*k*H*W floats per image.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, StateError, UsageError
from .tensor import Tensor, _check_dtypes, _make_op

# ---- activations -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (g * (x.data > 0),)

    return _make_op("relu", (x,), np.maximum(x.data, 0), backward_fn)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel parametric ReLU; channel axis is 1 for 2-D and 4-D input."""
    if x.ndim < 2:
        raise DimensionError(f"prelu expects at least 2-D input, got {x.shape}")
    if slope.ndim != 1 or slope.shape[0] != x.shape[1]:
        raise DimensionError(f"prelu slope shape {slope.shape} does not match channels {x.shape[1]}")
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(shape)
    neg = x.data < 0
    y = np.where(neg, a * x.data, x.data)

    def backward_fn(g):
        gx = np.where(neg, a * g, g)
        reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
        ga = (g * np.where(neg, x.data, 0)).sum(axis=reduce_axes)
        return gx, ga

    return _make_op("prelu", (x, slope), y, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _make_op("sigmoid", (x,), y, backward_fn)


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make_op("softmax", (x,), s, backward_fn)


# ---- affine ------------------------------------------------------------------


def fc(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: y = x W^T + b, weight is (out, in)."""
    if weight.ndim != 2:
        raise DimensionError(f"fc weight must be 2-D, got {weight.shape}")
    fin = x.shape[-1]
    if fin != weight.shape[1]:
        raise DimensionError(f"fc: input features {fin} != weight columns {weight.shape[1]}")
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes("fc", *tensors)
    fout = weight.shape[0]
    x2 = x.data.reshape(-1, fin)
    y2 = x2 @ weight.data.T
    if bias is not None:
        if bias.shape != (fout,):
            raise DimensionError(f"fc bias shape {bias.shape} != ({fout},)")
        y2 = y2 + bias.data
    y = y2.reshape(x.shape[:-1] + (fout,))

    def backward_fn(g):
        g2 = g.reshape(-1, fout)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x.data.reshape(-1, fin)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make_op("fc", tensors, y, backward_fn)


# ---- convolution ---------------------------------------------------------------


def _im2col(img: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(C,H,W) image -> (C*k*k, Ho*Wo) patch matrix, stride 1."""
    if pad:
        img = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(img, (k, k), axis=(1, 2))
    c, ho, wo = windows.shape[:3]
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int,
            pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    hp, wp = h + 2 * pad, w + 2 * pad
    img = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols5 = cols.reshape(c, k, k, ho, wo)
    for u in range(k):
        for v in range(k):
            img[:, u:u + ho, v:v + wo] += cols5[:, u, v]
    if pad:
        return img[:, pad:hp - pad, pad:wp - pad]
    return img


def _check_kernel(op: str, k1: int, k2: int):
    if k1 != k2 or k1 % 2 == 0:
        raise DimensionError(f"{op}: kernel must be square with odd size, got {k1}x{k2}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of (N,C,H,W) input with (Cout,Cin,k,k) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D x and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    _check_kernel("conv2d", kh, kw)
    k = kh
    if c != cin:
        raise DimensionError(f"conv2d: input channels {c} != weight channels {cin}")
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {k}x{k} too large for input {h}x{w} (pad {padding})")
    tensors = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes("conv2d", *tensors)

    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.empty((n, cout, ho, wo), dtype=x.dtype)
    for i in range(n):
        cols = _im2col(x.data[i], k, padding)
        out[i] = (wmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out += bias.data.reshape(1, cout, 1, 1)

    def backward_fn(g):
        gx = np.empty_like(x.data)
        gw = np.zeros_like(weight.data).reshape(cout, cin * k * k)
        for i in range(n):
            cols = _im2col(x.data[i], k, padding)
            gi = g[i].reshape(cout, ho * wo)
            gw += gi @ cols.T
            gx[i] = _col2im(wmat.T @ gi, c, h, w, k, padding, ho, wo)
        gw = gw.reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make_op("conv2d", tensors, out, backward_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: int = 1) -> Tensor:
    """Per-channel stride-1 convolution; weight is (C, k, k)."""
    if x.ndim != 4 or weight.ndim != 3:
        raise DimensionError(f"depthwise_conv2d expects 4-D x and 3-D weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cw, kh, kw = weight.shape
    _check_kernel("depthwise_conv2d", kh, kw)
    k = kh
    if cw != c:
        raise DimensionError(f"depthwise_conv2d: channels {c} != weight channels {cw}")
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"depthwise_conv2d: kernel {k}x{k} too large for {h}x{w} (pad {padding})")
    _check_dtypes("depthwise_conv2d", x, weight)

    def windows():
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))

    out = np.einsum("nchwuv,cuv->nchw", windows(), weight.data)

    def backward_fn(g):
        gw = np.einsum("nchwuv,nchw->cuv", windows(), g)
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        for u in range(k):
            for v in range(k):
                gxp[:, :, u:u + ho, v:v + wo] += g * weight.data[None, :, u, v, None, None]
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxp
        return gx, gw

    return _make_op("depthwise_conv2d", (x, weight), out, backward_fn)


# ---- pooling -------------------------------------------------------------------


def adaptive_max_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max pool to a fixed (out_h, out_w) grid.

    Output cell (i, j) covers rows [floor(i*H/oh), ceil((i+1)*H/oh)) and the
    analogous columns, so adjacent bins may overlap; ties inside a bin go to
    the first element in row-major order.
    """
    if x.ndim != 4:
        raise DimensionError(f"adaptive_max_pool2d expects 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"adaptive_max_pool2d: output size {out_h}x{out_w} must be positive")
    n, c, h, w = x.shape
    if out_h > h or out_w > w:
        raise DimensionError(
            f"adaptive_max_pool2d: target {out_h}x{out_w} exceeds input {h}x{w}")
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    idx = np.empty((n, c, out_h, out_w), dtype=np.int64)
    for i in range(out_h):
        si, ei = (i * h) // out_h, -((-(i + 1) * h) // out_h)
        for j in range(out_w):
            sj, ej = (j * w) // out_w, -((-(j + 1) * w) // out_w)
            region = x.data[:, :, si:ei, sj:ej].reshape(n, c, -1)
            a = region.argmax(axis=2)
            out[:, :, i, j] = np.take_along_axis(region, a[..., None], axis=2)[..., 0]
            idx[:, :, i, j] = (si + a // (ej - sj)) * w + (sj + a % (ej - sj))

    def backward_fn(g):
        gx = np.zeros((n * c, h * w), dtype=x.dtype)
        rows = np.arange(n * c)[:, None]
        np.add.at(gx, (rows, idx.reshape(n * c, -1)), g.reshape(n * c, -1))
        return (gx.reshape(n, c, h, w),)

    return _make_op("adaptive_max_pool2d", (x,), out, backward_fn)


# ---- normalization ---------------------------------------------------------------


class BNState:
    """Running statistics for one batch-norm layer."""

    __slots__ = ("running_mean", "running_var", "populated")

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.populated = False


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize per channel (axis 1) over the remaining axes.

    Training mode normalizes with biased batch statistics and folds an
    unbiased variance estimate into the running buffers; eval mode uses the
    running buffers and refuses to run before they have been populated.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"batch_norm: parameter shapes {gamma.shape}/{beta.shape} != ({channels},)")
    _check_dtypes("batch_norm", x, gamma, beta)
    reduce_axes = (0,) if x.ndim == 2 else (0, 2, 3)
    pshape = (1, channels) + (1,) * (x.ndim - 2)
    m = x.size // channels

    if training:
        mu = x.data.mean(axis=reduce_axes)
        var = ((x.data - mu.reshape(pshape)) ** 2).mean(axis=reduce_axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu.astype(state.running_mean.dtype)
        state.running_var = (1 - momentum) * state.running_var + momentum * unbiased.astype(state.running_var.dtype)
        state.populated = True
    else:
        if not state.populated:
            raise StateError("batch_norm in eval mode before any training pass populated the running statistics")
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(pshape)) * inv.reshape(pshape)
    y = gamma.data.reshape(pshape) * xhat + beta.data.reshape(pshape)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        gxhat = g * gamma.data.reshape(pshape)
        if training:
            s1 = gxhat.sum(axis=reduce_axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=reduce_axes, keepdims=True)
            gx = (inv.reshape(pshape) / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv.reshape(pshape)
        return gx, ggamma, gbeta

    return _make_op("batch_norm", (x, gamma, beta), y, backward_fn)


# ---- resampling -----------------------------------------------------------------


def _source_coords(out_size: int, in_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear x`factor` resize with half-pixel (align_corners=False) sampling."""
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects 4-D input, got {x.shape}")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise UsageError(f"bilinear_upsample: factor must be a positive integer, got {factor!r}")
    n, c, h, w = x.shape
    if factor == 1:
        def backward_identity(g):
            return (g,)
        return _make_op("bilinear_upsample", (x,), x.data.copy(), backward_identity)
    out_h, out_w = h * factor, w * factor

    y0, y1, wy = _source_coords(out_h, h)
    x0, x1, wx = _source_coords(out_w, w)
    wy = wy[:, None].astype(x.dtype)
    wx = wx[None, :].astype(x.dtype)
    w00, w01 = (1 - wy) * (1 - wx), (1 - wy) * wx
    w10, w11 = wy * (1 - wx), wy * wx

    xd = x.data
    out = (xd[:, :, y0][:, :, :, x0] * w00 + xd[:, :, y0][:, :, :, x1] * w01
           + xd[:, :, y1][:, :, :, x0] * w10 + xd[:, :, y1][:, :, :, x1] * w11)

    def backward_fn(g):
        gx = np.zeros((n * c, h, w), dtype=x.dtype)
        gf = g.reshape(n * c, out_h, out_w)
        rows = np.arange(n * c)[:, None, None]
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gx, (rows, yy[None, :, None], xx[None, None, :]), gf * ww)
        return (gx.reshape(n, c, h, w),)

    return _make_op("bilinear_upsample", (x,), out.astype(x.dtype, copy=False), backward_fn)


# ---- losses ----------------------------------------------------------------------


def binary_cross_entropy(pred: Tensor, target, clamp: float = 1e-7) -> Tensor:
    """Mean BCE over all elements; probabilities clamped to [clamp, 1-clamp].

    The target is treated as constant data and receives no gradient.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"binary_cross_entropy: pred {pred.shape} vs target {t.shape}")
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    m = pred.size

    def backward_fn(g):
        inside = (pred.data >= clamp) & (pred.data <= 1.0 - clamp)
        gp = g * inside * (p - t) / (p * (1.0 - p)) / m
        return (gp.astype(pred.dtype),)

    return _make_op("binary_cross_entropy", (pred,),
                    np.asarray(loss, dtype=pred.dtype), backward_fn)


# ---- parameter initialization ------------------------------------------------------


def uniform_fan_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                     dtype=np.float32) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) init used by every learned layer."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
