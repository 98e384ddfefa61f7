"""Segmentation losses and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

PROB_CLAMP = 1e-7
METRIC_NAMES = ("dice", "sensitivity", "precision", "voe", "rvd")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # weight of the distillation term
    beta: float = 0.1  # weight of the weighted BCE inside the segmentation loss
    sigma: float = 1.0  # Dice smoothing
    lam: float = 0.95  # positive-class weight of the BCE

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.lam < 1:
            raise ParameterError(f"lambda must lie in (0, 1), got {self.lam}")


def _pair(pred, truth, what: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"{what}: prediction {pred.shape} and ground truth {truth.shape} differ")
    return pred, truth


def dice_loss(pred, truth, sigma: float = 1.0) -> float:
    """Soft Dice loss ``1 - (2*sum(p*t) + sigma) / (sum(p) + sum(t) + sigma)``."""
    pred, truth = _pair(pred, truth, "dice_loss")
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    inter = float((pred * truth).sum())
    denom = float(pred.sum() + truth.sum()) + sigma
    return 1.0 - (2.0 * inter + sigma) / denom


def dice_loss_backward(pred, truth, sigma: float = 1.0) -> np.ndarray:
    pred, truth = _pair(pred, truth, "dice_loss")
    inter = float((pred * truth).sum())
    denom = float(pred.sum() + truth.sum()) + sigma
    return -(2.0 * truth * denom - (2.0 * inter + sigma)) / denom**2


def wbce_loss(pred, truth, lam: float = 0.95) -> float:
    """Class-weighted binary cross-entropy, averaged over pixels."""
    pred, truth = _pair(pred, truth, "wbce_loss")
    q = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_pixel = -lam * truth * np.log(q) - (1.0 - lam) * (1.0 - truth) * np.log1p(-q)
    return float(per_pixel.mean())


def wbce_loss_backward(pred, truth, lam: float = 0.95) -> np.ndarray:
    pred, truth = _pair(pred, truth, "wbce_loss")
    inside = (pred > PROB_CLAMP) & (pred < 1.0 - PROB_CLAMP)
    q = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -lam * truth / q + (1.0 - lam) * (1.0 - truth) / (1.0 - q)
    return np.where(inside, g, 0.0) / pred.size


def total_loss(pred, truth, l_csad_value: float, cfg: LossConfig = LossConfig()) -> float:
    return (
        dice_loss(pred, truth, cfg.sigma)
        + cfg.beta * wbce_loss(pred, truth, cfg.lam)
        + cfg.alpha * float(l_csad_value)
    )


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 100.0 if both_empty else 0.0
    return 100.0 * num / den


def evaluate(pred_mask, truth) -> tuple[float, float, float, float, float]:
    """Dice, sensitivity, precision, VOE and RVD (all in percent) for one mask pair.

    ``pred_mask`` is A and ``truth`` is B.  Dice is the overlap score
    ``2|A&B| / (|A|+|B|)``, precision is ``TP / (TP+FP)``.  Two empty masks
    score a perfect result.  A ratio whose denominator vanishes while the
    other mask is not empty scores 0, except RVD with an empty prediction,
    which is undefined and returned as NaN.
    """
    a = np.asarray(pred_mask)
    b = np.asarray(truth)
    if a.shape != b.shape:
        raise ShapeError(f"evaluate: prediction {a.shape} and ground truth {b.shape} differ")
    a = a.astype(bool)
    b = b.astype(bool)
    tp = int(np.count_nonzero(a & b))
    n_a = int(np.count_nonzero(a))
    n_b = int(np.count_nonzero(b))
    union = int(np.count_nonzero(a | b))
    empty = n_a == 0 and n_b == 0
    dice = _ratio(2 * tp, n_a + n_b, empty)
    sens = _ratio(tp, n_b, empty)
    prec = _ratio(tp, n_a, empty)
    voe = 0.0 if empty else 100.0 - _ratio(tp, union, empty)
    if empty:
        rvd = 0.0
    elif n_a == 0:
        rvd = math.nan
    else:
        rvd = 100.0 * (n_b - n_a) / n_a
    return dice, sens, prec, voe, rvd


def threshold_mask(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _mean_std(values: Iterable[float]) -> tuple[float, float, int]:
    v = np.array([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, 0
    return float(v.mean()), float(v.std()), int(v.size)


@dataclass
class MetricsReport:
    per_sample: list[tuple[float, float, float, float, float]]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_masks(cls, preds: Sequence, truths: Sequence, **meta) -> "MetricsReport":
        if len(preds) != len(truths):
            raise ShapeError(f"{len(preds)} predictions for {len(truths)} ground-truth masks")
        return cls([evaluate(p, t) for p, t in zip(preds, truths)], dict(meta))

    def values(self, name: str) -> list[float]:
        i = METRIC_NAMES.index(name)
        return [row[i] for row in self.per_sample]

    def summary(self, name: str) -> tuple[float, float]:
        mean, std, _ = _mean_std(self.values(name))
        return mean, std

    @property
    def dice(self) -> float:
        return self.summary("dice")[0]

    @property
    def sensitivity(self) -> float:
        return self.summary("sensitivity")[0]

    @property
    def precision(self) -> float:
        return self.summary("precision")[0]

    @property
    def voe(self) -> float:
        return self.summary("voe")[0]

    @property
    def rvd(self) -> float:
        return self.summary("rvd")[0]

    def to_text(self) -> str:
        lines = ["# csad metrics report"]
        for key, value in self.meta.items():
            lines.append(f"{key}: {value}")
        lines.append(f"samples: {len(self.per_sample)}")
        for name in METRIC_NAMES:
            mean, std, n = _mean_std(self.values(name))
            lines.append(f"{name}: {mean:.1f} ± {std:.1f}")
            if n != len(self.per_sample):
                lines.append(f"{name}_undefined: {len(self.per_sample) - n}")
        for k, row in enumerate(self.per_sample):
            fields = " ".join(f"{n}={v:.6f}" for n, v in zip(METRIC_NAMES, row))
            lines.append(f"sample.{k:04d}: {fields}")
        return "\n".join(lines) + "\n"


def parse_metrics_report(text: str) -> dict:
    """Parse :meth:`MetricsReport.to_text` output.

    Returns a dict with ``"summary"`` (metric -> (mean, std)), ``"per_sample"``
    (list of dicts) and every other key/value record as a string.
    """
    out: dict = {"summary": {}, "per_sample": []}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"malformed report line: {raw!r}")
        key, value = key.strip(), value.strip()
        if key.startswith("sample."):
            row = {}
            for item in value.split():
                name, _, v = item.partition("=")
                row[name] = float(v)
            out["per_sample"].append(row)
        elif key in METRIC_NAMES:
            mean, _, std = value.partition("±")
            out["summary"][key] = (float(mean), float(std))
        else:
            out[key] = value
    return out
