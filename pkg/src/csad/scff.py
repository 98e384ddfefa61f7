"""Spatial correlated feature fusion of two modality feature stacks.

Both stacks go through one shared 1x1 projection.  A position-by-position
correlation matrix ``Z`` (dot products divided by the projected width) is
softmax-normalised over the source position, so every fused position is a
convex combination of projected source features::

    out_t2w[:, j] = sum_i x_i * softmax_i(Z[i, j])    (x_i: projected T2W at i)
    out_adc[:, j] = sum_i y_i * softmax_i(Z[j, i])    (y_i: projected ADC at i)

The two halves are concatenated along channels.  Swapping the inputs swaps
the halves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class CorrelationMatrix:
    z: np.ndarray  # (HW, HW); z[i, j] = x_i . y_j / normalizer
    normalizer: float


def _check_proj(features: np.ndarray, proj: np.ndarray) -> None:
    if proj.ndim != 4 or proj.shape[2:] != (1, 1):
        raise ShapeError(f"projection kernels must be (C~,C,1,1), got {proj.shape}")
    if features.ndim != 3 or features.shape[0] != proj.shape[1]:
        raise ShapeError(f"features {features.shape} do not match projection kernels {proj.shape}")


def project_general(features: np.ndarray, proj_kernels: np.ndarray) -> np.ndarray:
    """Shared 1x1 convolution: ``(C,H,W) -> (C~,H,W)``."""
    features = np.asarray(features, dtype=np.float64)
    proj_kernels = np.asarray(proj_kernels, dtype=np.float64)
    _check_proj(features, proj_kernels)
    c, h, w = features.shape
    out = proj_kernels[:, :, 0, 0] @ features.reshape(c, h * w)
    return out.reshape(-1, h, w)


def spatial_correlation(x: np.ndarray, y: np.ndarray) -> CorrelationMatrix:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or x.shape != y.shape:
        raise ShapeError(f"correlation needs two equal (C,H,W) stacks, got {x.shape} and {y.shape}")
    c = x.shape[0]
    xf = x.reshape(c, -1)
    yf = y.reshape(c, -1)
    return CorrelationMatrix((xf.T @ yf) / c, float(c))


def _softmax_cols(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _softmax_cols_backward(s: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return s * (upstream - (upstream * s).sum(axis=0, keepdims=True))


@dataclass
class ScffCache:
    f_t2w: np.ndarray
    f_adc: np.ndarray
    proj: np.ndarray
    x: np.ndarray  # (C~, HW)
    y: np.ndarray
    weights_t2w: np.ndarray  # column-softmax of Z
    weights_adc: np.ndarray  # column-softmax of Z^T

    @property
    def spatial(self) -> tuple[int, int]:
        return self.f_t2w.shape[1], self.f_t2w.shape[2]


def scff_forward(f_t2w: np.ndarray, f_adc: np.ndarray, proj_kernels: np.ndarray) -> tuple[np.ndarray, ScffCache]:
    f_t2w = np.asarray(f_t2w, dtype=np.float64)
    f_adc = np.asarray(f_adc, dtype=np.float64)
    if f_t2w.shape != f_adc.shape:
        raise ShapeError(f"modality features differ in shape: {f_t2w.shape} vs {f_adc.shape}")
    x = project_general(f_t2w, proj_kernels)
    y = project_general(f_adc, proj_kernels)
    z = spatial_correlation(x, y).z
    c, h, w = x.shape
    xf = x.reshape(c, h * w)
    yf = y.reshape(c, h * w)
    wt = _softmax_cols(z)
    wa = _softmax_cols(z.T)
    out = np.concatenate([(xf @ wt).reshape(c, h, w), (yf @ wa).reshape(c, h, w)], axis=0)
    cache = ScffCache(f_t2w, f_adc, np.asarray(proj_kernels, dtype=np.float64), xf, yf, wt, wa)
    return out, cache


def scff_fuse(f_t2w: np.ndarray, f_adc: np.ndarray, proj_kernels: np.ndarray) -> np.ndarray:
    return scff_forward(f_t2w, f_adc, proj_kernels)[0]


def scff_backward(cache: ScffCache, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``(f_t2w, f_adc, proj_kernels)``."""
    c, n = cache.x.shape
    h, w = cache.spatial
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (2 * c, h, w):
        raise ShapeError(f"fusion upstream gradient {upstream.shape}, expected {(2 * c, h, w)}")
    g1 = upstream[:c].reshape(c, n)
    g2 = upstream[c:].reshape(c, n)
    x, y, wt, wa = cache.x, cache.y, cache.weights_t2w, cache.weights_adc

    gx = g1 @ wt.T
    gy = g2 @ wa.T
    gz = _softmax_cols_backward(wt, x.T @ g1)
    gz += _softmax_cols_backward(wa, y.T @ g2).T
    gx += (y @ gz.T) / c
    gy += (x @ gz) / c

    p = cache.proj[:, :, 0, 0]
    ft = cache.f_t2w.reshape(cache.f_t2w.shape[0], n)
    fa = cache.f_adc.reshape(cache.f_adc.shape[0], n)
    grad_t2w = (p.T @ gx).reshape(cache.f_t2w.shape)
    grad_adc = (p.T @ gy).reshape(cache.f_adc.shape)
    grad_proj = (gx @ ft.T + gy @ fa.T)[:, :, None, None]
    return grad_t2w, grad_adc, grad_proj
