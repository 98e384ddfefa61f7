"""Attention map generation and cross-modal attention distillation.

An attention map is a positive ``(H, W)`` array summing to one.  It is built
from a feature stack by resizing the stack, summing squared activations over
channels and applying a spatial softmax.  Maps from the two modality streams
are pulled together with a symmetric KL loss along the pairs of a
:class:`DistillPlan`.
"""
from __future__ import annotations

import enum
from functools import lru_cache
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import (
    bilinear_upsample,
    bilinear_upsample_backward,
    interp_matrix,
    spatial_softmax,
)

KL_FLOOR = 1e-12


class Scheme(str, enum.Enum):
    """Which attention maps get distilled into each other."""

    NLC = "NLC"  # no connection
    PLC = "PLC"  # same stage across modalities
    ILC = "ILC"  # stage m of one modality with stage m+1 of the other

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ParameterError(f"unknown connection scheme {value!r}; expected NLC, PLC or ILC") from None


STREAMS = ("t2w", "adc")


@dataclass(frozen=True)
class DistillPair:
    """Map ``source`` at stage ``m`` is compared with the other stream's map at stage ``m2``.

    Stage indices are 1-based.
    """

    source: str
    m: int
    m2: int

    @property
    def target(self) -> str:
        return "adc" if self.source == "t2w" else "t2w"


@dataclass(frozen=True)
class DistillPlan:
    scheme: Scheme
    n_blocks: int
    pairs: tuple[DistillPair, ...]

    def __len__(self) -> int:
        return len(self.pairs)


def build_distill_plan(scheme, n_blocks: int) -> DistillPlan:
    scheme = Scheme.parse(scheme)
    if n_blocks < 2:
        raise ParameterError(f"need at least 2 attention blocks per stream, got {n_blocks}")
    pairs: list[DistillPair] = []
    if scheme is Scheme.PLC:
        for m in range(1, n_blocks + 1):
            pairs += [DistillPair("t2w", m, m), DistillPair("adc", m, m)]
    elif scheme is Scheme.ILC:
        # no wrap-around: the last pair is (N-1, N)
        for m in range(1, n_blocks):
            pairs += [DistillPair("t2w", m, m + 1), DistillPair("adc", m, m + 1)]
    return DistillPlan(scheme, n_blocks, tuple(pairs))


@lru_cache(maxsize=32)
def _kron_interp(h: int, w: int, th: int, tw: int) -> np.ndarray:
    k = np.kron(interp_matrix(h, th), interp_matrix(w, tw))
    k.setflags(write=False)
    return k


@dataclass
class AmgbCache:
    features_shape: tuple[int, ...]
    target: tuple[int, int]
    attention: np.ndarray
    upsampled: np.ndarray | None = None  # direct route
    flat: np.ndarray | None = None  # Gram route: (..., C, h*w) features
    gram: np.ndarray | None = None  # Gram route: (..., h*w, h*w)


def _check_amgb(features: np.ndarray, target_h: int, target_w: int) -> None:
    if features.ndim not in (3, 4) or min(features.shape) < 1:
        raise ShapeError(f"features must be (C,H,W) or (N,C,H,W), got {features.shape}")
    if target_h < 1 or target_w < 1:
        raise ParameterError(f"attention target size must be positive, got {target_h}x{target_w}")


def amgb_forward(features: np.ndarray, target_h: int, target_w: int) -> tuple[np.ndarray, AmgbCache]:
    """:func:`amgb` plus the intermediates :func:`amgb_backward_cached` needs.

    When the source grid has far fewer positions than channels the squared
    magnitude map is formed from the position Gram matrix ``F^T F`` instead of
    materialising the upsampled stack; both routes give the same values up to
    rounding.
    """
    features = np.asarray(features, dtype=np.float64)
    _check_amgb(features, target_h, target_w)
    c, h, w = features.shape[-3:]
    cache = AmgbCache(features.shape, (target_h, target_w), np.empty(0))
    if (h, w) != (target_h, target_w) and 4 * h * w <= c:
        flat = features.reshape(features.shape[:-2] + (h * w,))
        gram = np.matmul(np.swapaxes(flat, -1, -2), flat)
        k = _kron_interp(h, w, target_h, target_w)
        s = (np.matmul(k, gram) * k).sum(axis=-1).reshape(features.shape[:-3] + (target_h, target_w))
        cache.flat, cache.gram = flat, gram
    else:
        up = bilinear_upsample(features, target_h, target_w)
        s = np.einsum("...chw,...chw->...hw", up, up)
        cache.upsampled = up
    cache.attention = spatial_softmax(s)
    return cache.attention, cache


def amgb_backward_cached(cache: AmgbCache, upstream: np.ndarray) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = cache.features_shape[:-3] + cache.target
    if upstream.shape != expected:
        raise ShapeError(f"attention upstream gradient {upstream.shape}, expected {expected}")
    y = cache.attention
    grad_s = y * (upstream - (upstream * y).sum(axis=(-2, -1), keepdims=True))
    c, h, w = cache.features_shape[-3:]
    if cache.upsampled is not None:
        grad_up = 2.0 * cache.upsampled * grad_s[..., None, :, :]
        return bilinear_upsample_backward(grad_up, h, w)
    k = _kron_interp(h, w, *cache.target)
    gs = grad_s.reshape(grad_s.shape[:-2] + (-1, 1))
    grad_gram = np.matmul(np.swapaxes(k * gs, -1, -2), k)
    grad_flat = np.matmul(cache.flat, grad_gram + np.swapaxes(grad_gram, -1, -2))
    return grad_flat.reshape(cache.features_shape)


def amgb(features: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Attention map of a ``(C, H, W)`` feature stack at ``(target_h, target_w)``.

    The stack is bilinearly resized, squared activations are summed over
    channels and a spatial softmax is applied.  A leading batch axis is
    allowed and gives one map per item.
    """
    return amgb_forward(features, target_h, target_w)[0]


def amgb_backward(features: np.ndarray, target_h: int, target_w: int, upstream: np.ndarray) -> np.ndarray:
    return amgb_backward_cached(amgb_forward(features, target_h, target_w)[1], upstream)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"attention maps must be 2-D with equal shapes, got {a.shape} and {b.shape}")


def l_ad(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric KL divergence between two maps, averaged over ``2*H*W``.

    Each pixel contributes ``a*ln(a/b) + b*ln(b/a) = (a-b)*(ln a - ln b)``,
    with both logarithm arguments floored at ``KL_FLOOR``.  Written that way
    the pixel term is nonnegative in floating point and bit-identical under
    swapping the arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    la = np.log(np.maximum(a, KL_FLOOR))
    lb = np.log(np.maximum(b, KL_FLOOR))
    return float(((a - b) * (la - lb)).sum() / (2.0 * a.size))


def l_ad_backward(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    ca = np.maximum(a, KL_FLOOR)
    cb = np.maximum(b, KL_FLOOR)
    diff_log = np.log(ca) - np.log(cb)
    diff = a - b
    grad_a = diff_log + np.where(a > KL_FLOOR, diff / ca, 0.0)
    grad_b = -diff_log - np.where(b > KL_FLOOR, diff / cb, 0.0)
    norm = 1.0 / (2.0 * a.size)
    return grad_a * norm, grad_b * norm


@dataclass
class CsadResult:
    value: float
    grad_t2w: list[np.ndarray]
    grad_adc: list[np.ndarray]
    n_terms: int


def l_csad(
    maps_t2w: Sequence[np.ndarray],
    maps_adc: Sequence[np.ndarray],
    plan: DistillPlan,
    gradient_mode: str = "both",
) -> CsadResult:
    """Sum of :func:`l_ad` over the plan's pairs, with gradients for every map.

    ``gradient_mode="student_only"`` lets each pair's gradient reach only its
    source (shallower, or for PLC the first-listed) map; the other side is
    treated as a fixed target.
    """
    if gradient_mode not in ("both", "student_only"):
        raise ParameterError(f"gradient_mode must be 'both' or 'student_only', got {gradient_mode!r}")
    if len(maps_t2w) != plan.n_blocks or len(maps_adc) != plan.n_blocks:
        raise ShapeError(
            f"plan expects {plan.n_blocks} maps per stream, got {len(maps_t2w)} and {len(maps_adc)}"
        )
    maps = {"t2w": maps_t2w, "adc": maps_adc}
    grads = {k: [np.zeros(np.shape(m)) for m in v] for k, v in maps.items()}
    total = 0.0
    for pair in plan.pairs:
        a = maps[pair.source][pair.m - 1]
        b = maps[pair.target][pair.m2 - 1]
        total += l_ad(a, b)
        ga, gb = l_ad_backward(a, b)
        grads[pair.source][pair.m - 1] += ga
        if gradient_mode == "both":
            grads[pair.target][pair.m2 - 1] += gb
    return CsadResult(total, grads["t2w"], grads["adc"], len(plan.pairs))
