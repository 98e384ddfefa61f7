"""Dense float64 tensor operations with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every public
function returns freshly allocated storage; inputs are never modified.

Spatial operations take ``(C, H, W)`` arrays.  Convolution, pooling, relu and
upsampling additionally accept a leading batch axis ``(N, C, H, W)`` so the
network can push a whole mini-batch through one call.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "as_tensor",
    "conv2d",
    "conv2d_backward",
    "conv2d_gemm",
    "conv_output_size",
    "relu",
    "relu_backward",
    "maxpool2x2",
    "maxpool2x2_backward",
    "spatial_softmax",
    "spatial_softmax_backward",
    "bilinear_upsample",
    "bilinear_upsample_backward",
    "interp_matrix",
    "matmul",
    "matmul_backward",
    "add",
    "multiply",
    "multiply_backward",
    "square",
    "square_backward",
    "absolute",
    "absolute_backward",
    "scale",
    "channel_sum",
    "channel_sum_backward",
    "reshape",
    "transpose",
    "sigmoid",
]


def as_tensor(x) -> np.ndarray:
    """Return a C-contiguous float64 copy of ``x``."""
    return np.array(x, dtype=np.float64, order="C", copy=True)


def _spatial(x: np.ndarray, name: str = "input") -> None:
    if x.ndim not in (3, 4):
        raise ShapeError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[int, int]:
    _spatial(x)
    if w.ndim != 4:
        raise ShapeError(f"kernels must be (C_out,C_in,kh,kw), got shape {w.shape}")
    if x.shape[-3] != w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[-3]} channels but kernels expect {w.shape[1]} "
            f"(input {x.shape}, kernels {w.shape})"
        )
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    kh, kw = w.shape[2:]
    h, wd = x.shape[-2] + 2 * padding, x.shape[-1] + 2 * padding
    if kh > h or kw > wd:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")
    return conv_output_size(x.shape[-2], kh, stride, padding), conv_output_size(
        x.shape[-1], kw, stride, padding
    )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(x, widths)


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    # xp: (N, C, Hp, Wp) -> (N, kh*kw*C, ho*wo), rows ordered (i, j, c)
    n, c = xp.shape[:2]
    cols = np.empty((n, kh, kw, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, kh * kw * c, ho * wo)


def _kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    # (C_out, C_in, kh, kw) -> (C_out, kh*kw*C_in), matching the im2col row order
    return kernels.transpose(0, 2, 3, 1).reshape(kernels.shape[0], -1)


def conv2d(
    x: np.ndarray,
    kernels: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    method: str = "direct",
) -> np.ndarray:
    """2-D cross-correlation (no kernel flip).

    ``method="direct"`` accumulates products one tap at a time in the order
    (input channel, kernel row, kernel column), which is the order a plain
    nested loop uses; its output is reproducible bit for bit.  ``"gemm"``
    lowers to one BLAS matrix product per call and is the path used during
    training.  The two agree to rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    ho, wo = _check_conv(x, kernels, stride, padding)
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    xp = _pad(xb, padding)
    co, ci, kh, kw = kernels.shape
    if method == "direct":
        out = np.zeros((xb.shape[0], co, ho, wo))
        for c in range(ci):
            for i in range(kh):
                for j in range(kw):
                    tap = xp[:, None, c, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    out += kernels[None, :, c, i, j, None, None] * tap
    elif method == "gemm":
        cols = _im2col(xp, kh, kw, ho, wo, stride)
        out = np.matmul(_kernel_matrix(kernels), cols).reshape(xb.shape[0], co, ho, wo)
    else:
        raise ParameterError(f"unknown conv method {method!r}")
    return out[0] if squeeze else out


def conv2d_gemm(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0):
    """``conv2d(method="gemm")`` that also returns the im2col matrix for reuse in the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    ho, wo = _check_conv(x, kernels, stride, padding)
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    co, _, kh, kw = kernels.shape
    cols = _im2col(_pad(xb, padding), kh, kw, ho, wo, stride)
    out = np.matmul(_kernel_matrix(kernels), cols).reshape(xb.shape[0], co, ho, wo)
    return (out[0] if squeeze else out), cols


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    upstream: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of ``conv2d`` w.r.t. its input and kernels.

    With a batch axis the kernel gradient is summed over the batch.  ``cols``
    is the im2col matrix from :func:`conv2d_gemm`; it is rebuilt when omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    ho, wo = _check_conv(x, kernels, stride, padding)
    co, ci, kh, kw = kernels.shape
    expected = x.shape[:-3] + (co, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient has shape {upstream.shape}, conv output is {expected}")
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    gb = upstream[None] if squeeze else upstream
    n = xb.shape[0]
    if cols is None:
        cols = _im2col(_pad(xb, padding), kh, kw, ho, wo, stride)
    g2 = gb.reshape(n, co, ho * wo)
    grad_w = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0)
    grad_w = np.ascontiguousarray(grad_w.reshape(co, kh, kw, ci).transpose(0, 3, 1, 2))
    if not need_input_grad:
        return None, grad_w
    gcols = np.matmul(_kernel_matrix(kernels).T, g2).reshape(n, kh, kw, ci, ho, wo)
    hp, wp = xb.shape[-2] + 2 * padding, xb.shape[-1] + 2 * padding
    gxp = np.zeros((n, ci, hp, wp))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
    if padding:
        gxp = gxp[..., padding:-padding, padding:-padding]
    grad_x = np.ascontiguousarray(gxp)
    return (grad_x[0] if squeeze else grad_x), grad_w


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != np.shape(upstream):
        raise ShapeError(f"relu: upstream {np.shape(upstream)} vs input {x.shape}")
    return np.where(x > 0, upstream, 0.0)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    x = np.asarray(x, dtype=np.float64)
    _spatial(x)
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    if h == 0 or w == 0:
        raise ShapeError(f"maxpool2x2 needs spatial dims >= 2, got {x.shape[-2:]}")
    return np.maximum(
        np.maximum(x[..., 0 : 2 * h : 2, 0 : 2 * w : 2], x[..., 0 : 2 * h : 2, 1 : 2 * w : 2]),
        np.maximum(x[..., 1 : 2 * h : 2, 0 : 2 * w : 2], x[..., 1 : 2 * h : 2, 1 : 2 * w : 2]),
    )


def maxpool2x2_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Routes each upstream value to the first maximal element of its window."""
    x = np.asarray(x, dtype=np.float64)
    _spatial(x)
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    lead = x.shape[:-2]
    if np.shape(upstream) != lead + (h, w):
        raise ShapeError(f"maxpool2x2: upstream {np.shape(upstream)} vs output {lead + (h, w)}")
    y = maxpool2x2(x)
    upstream = np.asarray(upstream, dtype=np.float64)
    out = np.zeros(x.shape)
    free = np.ones(y.shape, dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            hit = free & (x[..., di : 2 * h : 2, dj : 2 * w : 2] == y)
            out[..., di : 2 * h : 2, dj : 2 * w : 2] = np.where(hit, upstream, 0.0)
            free &= ~hit
    return out


def spatial_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax over the last two (spatial) axes, max-subtracted."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2:
        raise ShapeError(f"spatial_softmax needs at least 2 dims, got {m.shape}")
    e = np.exp(m - m.max(axis=(-2, -1), keepdims=True))
    return e / e.sum(axis=(-2, -1), keepdims=True)


def spatial_softmax_backward(m: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if m.shape != upstream.shape:
        raise ShapeError(f"spatial_softmax: upstream {upstream.shape} vs input {m.shape}")
    y = spatial_softmax(m)
    return y * (upstream - (upstream * y).sum(axis=(-2, -1), keepdims=True))


@lru_cache(maxsize=128)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in))
    scale_ = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale_ - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat.setflags(write=False)
    return mat


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix (align-corners-false), shape ``(n_out, n_in)``."""
    if n_in < 1 or n_out < 1:
        raise ParameterError(f"interpolation sizes must be >= 1, got {n_in} -> {n_out}")
    return _interp_matrix(int(n_in), int(n_out))


def bilinear_upsample(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize ``(..., H, W)`` to ``(..., target_h, target_w)``.

    Sample centres sit at ``(i + 0.5) * scale - 0.5`` and are clamped to the
    source grid.  Equal source and target sizes give an exact copy.
    """
    x = np.asarray(x, dtype=np.float64)
    if target_h < 1 or target_w < 1:
        raise ParameterError(f"target size must be positive, got {target_h}x{target_w}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (target_h, target_w):
        return x.copy()
    mh = interp_matrix(h, target_h)
    mw = interp_matrix(w, target_w)
    # width pass as one flat GEMM, then a batched height pass
    y = (x.reshape(-1, w) @ mw.T).reshape(-1, h, target_w)
    return np.matmul(mh, y).reshape(x.shape[:-2] + (target_h, target_w))


def bilinear_upsample_backward(upstream: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim < 2:
        raise ShapeError(f"upstream needs at least 2 dims, got {upstream.shape}")
    th, tw = upstream.shape[-2:]
    if (th, tw) == (src_h, src_w):
        return upstream.copy()
    mh = interp_matrix(src_h, th)
    mw = interp_matrix(src_w, tw)
    y = np.matmul(mh.T, upstream.reshape(-1, th, tw))
    return (y.reshape(-1, tw) @ mw).reshape(upstream.shape[:-2] + (src_h, src_w))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.shape(upstream) != (a.shape[0], b.shape[1]):
        raise ShapeError(f"matmul: upstream {np.shape(upstream)} vs output {(a.shape[0], b.shape[1])}")
    return upstream @ b.T, a.T @ upstream


def _same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shapes {np.shape(a)} and {np.shape(b)} differ (only scalar broadcasting is supported)")


def add(a, b) -> np.ndarray:
    if np.ndim(a) and np.ndim(b):
        _same(a, b, "add")
    return np.add(a, b, dtype=np.float64)


def multiply(a, b) -> np.ndarray:
    if np.ndim(a) and np.ndim(b):
        _same(a, b, "multiply")
    return np.multiply(a, b, dtype=np.float64)


def multiply_backward(a, b, upstream) -> tuple[np.ndarray, np.ndarray]:
    return np.multiply(upstream, b), np.multiply(upstream, a)


def square(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * x


def square_backward(x, upstream) -> np.ndarray:
    _same(x, upstream, "square")
    return 2.0 * np.asarray(x) * upstream


def absolute(x) -> np.ndarray:
    return np.abs(np.asarray(x, dtype=np.float64))


def absolute_backward(x, upstream) -> np.ndarray:
    # subgradient 0 at x == 0
    _same(x, upstream, "absolute")
    return np.sign(x) * upstream


def scale(x, c: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * float(c)


def channel_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the channel axis: ``(C,H,W) -> (H,W)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"channel_sum expects (C,H,W), got {x.shape}")
    return x.sum(axis=0)


def channel_sum_backward(shape: tuple[int, ...], upstream: np.ndarray) -> np.ndarray:
    if tuple(shape[1:]) != np.shape(upstream):
        raise ShapeError(f"channel_sum: upstream {np.shape(upstream)} vs {shape[1:]}")
    return np.broadcast_to(upstream, shape).copy()


def reshape(x: np.ndarray, shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return x.reshape(shape).copy()


def transpose(x: np.ndarray, axes=None) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(np.asarray(x, dtype=np.float64), axes))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
