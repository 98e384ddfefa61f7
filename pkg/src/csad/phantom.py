"""Synthetic paired-modality phantoms, augmentation and on-disk datasets.

Each phantom has a smooth background, an elliptical gland and one to three
elliptical lesions inside it.  Lesions are darker than their surroundings in
the T2W image and brighter in the ADC image.  Each modality also carries
decoy blobs of the same polarity that do not appear in the other modality,
so a lesion is only identifiable by looking at both images.

Random streams are split with ``numpy.random.SeedSequence`` spawn keys, so
generation, augmentation and dataset bookkeeping never share draws.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, ParameterError
from .fileio import read_mask_pgm, read_rt1, write_mask_pgm, write_rt1

GENERATE_DOMAIN = 0x6E4
AUGMENT_DOMAIN = 0xA06
DATASET_DOMAIN = 0xD5E

MIN_LESION_FRACTION = 0.005
MAX_LESION_FRACTION = 0.15


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def derive_seed(seed: int, *key: int) -> int:
    """A 32-bit seed derived from ``seed`` and a spawn key."""
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1)[0])


@dataclass
class PhantomSample:
    t2w: np.ndarray  # (1, H, W) in [0, 1]
    adc: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    seed: int

    @property
    def lesion_fraction(self) -> float:
        return float(self.mask.mean())

    def copy(self) -> "PhantomSample":
        return PhantomSample(self.t2w.copy(), self.adc.copy(), self.mask.copy(), self.seed)


def _ellipse_radius(yy, xx, cy, cx, ry, rx, theta):
    """Normalised elliptical radius: < 1 inside the ellipse."""
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return np.sqrt(u * u + v * v)


def _soft(r: np.ndarray, edge: float = 0.15) -> np.ndarray:
    # 1 well inside, 0 outside, smooth ramp across the boundary
    return np.clip((1.0 + edge - r) / (2.0 * edge), 0.0, 1.0)


def _draw_blob(rng, yy, xx, gland, r_lo, r_hi):
    cy, cx, gry, grx, gth = gland
    rho = 0.6 * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    c, s = math.cos(gth), math.sin(gth)
    u, v = rho * math.cos(phi) * grx, rho * math.sin(phi) * gry
    by, bx = cy + s * u + c * v, cx + c * u - s * v
    ry, rx = rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi)
    return _ellipse_radius(yy, xx, by, bx, ry, rx, rng.uniform(0, math.pi))


def generate(seed: int, h: int = 64, w: int = 64) -> PhantomSample:
    """Deterministic phantom for ``seed``; lesion area is 0.5%-15% of the image."""
    if h < 16 or w < 16:
        raise ParameterError(f"phantom size must be at least 16x16, got {h}x{w}")
    rng = _rng(seed, GENERATE_DOMAIN)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")

    background = np.full((h, w), 0.3)
    for _ in range(3):
        fy, fx = rng.uniform(0.2, 1.0, size=2)
        background += 0.04 * np.cos(math.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * math.pi))

    gland = (rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.45, 0.6), rng.uniform(0.45, 0.6),
             rng.uniform(0, math.pi))
    gland_r = _ellipse_radius(yy, xx, *gland)
    gland_mask = gland_r <= 1.0

    for _ in range(100):
        n_lesions = int(rng.integers(1, 4))
        radii = [_draw_blob(rng, yy, xx, gland, 0.08, 0.2) for _ in range(n_lesions)]
        lesion = np.zeros((h, w), dtype=bool)
        for r in radii:
            lesion |= r <= 1.0
        lesion &= gland_mask
        frac = lesion.mean()
        if MIN_LESION_FRACTION <= frac <= MAX_LESION_FRACTION:
            break
    else:  # pragma: no cover - the radius range makes this unreachable for h, w >= 16
        raise RuntimeError(f"could not place a lesion for seed {seed}")
    lesion_soft = np.zeros((h, w))
    for r in radii:
        lesion_soft = np.maximum(lesion_soft, _soft(r))
    lesion_soft *= gland_mask

    def decoys(n):
        out = np.zeros((h, w))
        for _ in range(n):
            r = _draw_blob(rng, yy, xx, gland, 0.08, 0.2)
            out = np.maximum(out, _soft(r))
        return out * gland_mask * (1.0 - lesion)

    t2w_decoy = decoys(int(rng.integers(1, 3)))
    adc_decoy = decoys(int(rng.integers(1, 3)))
    gland_soft = _soft(gland_r, 0.1)

    t2w = background + 0.3 * gland_soft - 0.22 * np.maximum(lesion_soft, t2w_decoy)
    adc = background + 0.15 * gland_soft + 0.22 * np.maximum(lesion_soft, adc_decoy)
    t2w += rng.normal(0.0, 0.03, size=(h, w))
    adc += rng.normal(0.0, 0.03, size=(h, w))
    return PhantomSample(
        np.clip(t2w, 0.0, 1.0)[None],
        np.clip(adc, 0.0, 1.0)[None],
        lesion.astype(np.uint8),
        int(seed),
    )


def _affine(shape, angle_deg: float, zoom: float, shift: tuple[float, float]):
    """Matrix/offset mapping output pixel coordinates to input coordinates."""
    h, w = shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    forward = zoom * rot
    inverse = np.linalg.inv(forward)
    offset = centre - inverse @ (centre + np.asarray(shift))
    return inverse, offset


def augment(sample: PhantomSample, seed: int) -> PhantomSample:
    """Random rotation, zoom, shift and Gaussian blur, each applied with probability 0.5.

    The geometric part is one affine map shared by both images (bilinear) and
    the mask (nearest neighbour).  Blur touches the images only.
    """
    rng = _rng(seed, AUGMENT_DOMAIN)
    use = rng.uniform(size=4) < 0.5
    angle = rng.uniform(-15.0, 15.0)
    zoom = rng.uniform(0.9, 1.1)
    h, w = sample.mask.shape
    shift = (rng.uniform(-0.1, 0.1) * h, rng.uniform(-0.1, 0.1) * w)
    sigma = rng.uniform(0.5, 1.5)

    out = sample.copy()
    if use[0] or use[1] or use[2]:
        matrix, offset = _affine(
            (h, w), angle if use[0] else 0.0, zoom if use[1] else 1.0, shift if use[2] else (0.0, 0.0)
        )
        for name in ("t2w", "adc"):
            img = getattr(out, name)[0]
            warped = ndimage.affine_transform(img, matrix, offset, order=1, mode="nearest")
            setattr(out, name, np.clip(warped, 0.0, 1.0)[None])
        out.mask = ndimage.affine_transform(out.mask, matrix, offset, order=0, mode="constant", cval=0)
    if use[3]:
        out.t2w = ndimage.gaussian_filter(out.t2w[0], sigma, mode="reflect", truncate=4.0)[None]
        out.adc = ndimage.gaussian_filter(out.adc[0], sigma, mode="reflect", truncate=4.0)[None]
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def split_counts(n: int, split: tuple[float, float]) -> tuple[int, int]:
    train_pct, val_pct = split
    if train_pct < 0 or val_pct < 0 or abs(train_pct + val_pct - 100.0) > 1e-9:
        raise ParameterError(f"split percentages must be non-negative and sum to 100, got {split}")
    n_train = int(round(n * train_pct / 100.0))
    return n_train, n - n_train


def make_dataset(
    root,
    n: int,
    h: int = 64,
    w: int = 64,
    seed: int = 0,
    split: tuple[float, float] = (80.0, 20.0),
    folds: int = 5,
) -> dict:
    """Write ``n`` phantoms under ``root`` and return the manifest."""
    if n < 10:
        raise ParameterError(f"a dataset needs at least 10 samples, got {n}")
    if not 2 <= folds <= n:
        raise ParameterError(f"folds must be between 2 and n, got {folds}")
    root = Path(root)
    n_train, _ = split_counts(n, split)
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for k in range(n):
            sample_seed = derive_seed(seed, DATASET_DOMAIN, k)
            s = generate(sample_seed, h, w)
            name = f"sample_{k:04d}"
            d = root / name
            d.mkdir(exist_ok=True)
            write_rt1(d / "t2w.rt1", s.t2w)
            write_rt1(d / "adc.rt1", s.adc)
            write_mask_pgm(d / "mask.pgm", s.mask)
            entries.append(
                {
                    "name": name,
                    "seed": sample_seed,
                    "lesion_fraction": round(s.lesion_fraction, 8),
                    "sha256": {f: _sha256(d / f) for f in ("t2w.rt1", "adc.rt1", "mask.pgm")},
                }
            )
        order = _rng(seed, DATASET_DOMAIN, 0xF01D).permutation(n).tolist()
        fold_lists = [sorted(order[f::folds]) for f in range(folds)]
        manifest = {
            "format": "csad-dataset",
            "version": 1,
            "seed": int(seed),
            "n": n,
            "size": [h, w],
            "samples": entries,
            "split": {"train": sorted(order[:n_train]), "val": sorted(order[n_train:])},
            "folds": fold_lists,
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        for f, members in enumerate(fold_lists):
            (root / f"fold_{f}.txt").write_text("".join(f"sample_{k:04d}\n" for k in members))
    except OSError as exc:
        raise DataError(f"cannot write dataset under {root}: {exc}") from exc
    return manifest


class Dataset:
    """A dataset directory written by :func:`make_dataset`, loaded into memory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        try:
            self.manifest = json.loads(path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read dataset manifest {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from exc
        if self.manifest.get("format") != "csad-dataset":
            raise DataError(f"{path}: not a csad dataset manifest")
        self._cache: dict[int, PhantomSample] = {}

    def __len__(self) -> int:
        return len(self.manifest["samples"])

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.manifest["size"])

    @property
    def n_folds(self) -> int:
        return len(self.manifest["folds"])

    def __getitem__(self, k: int) -> PhantomSample:
        if k not in self._cache:
            entry = self.manifest["samples"][k]
            self._cache[k] = load_sample(self.root / entry["name"], entry.get("seed", 0))
        return self._cache[k]

    def indices(self, which: str, fold: int | None = None) -> list[int]:
        """``which`` is ``"train"`` or ``"val"``; with ``fold`` the held-out fold is the validation set."""
        if fold is None:
            return list(self.manifest["split"][which])
        if not 0 <= fold < self.n_folds:
            raise DataError(f"fold {fold} out of range; dataset has {self.n_folds} folds")
        held = self.manifest["folds"][fold]
        if which == "val":
            return list(held)
        held_set = set(held)
        return [k for k in range(len(self)) if k not in held_set]


def load_sample(directory, seed: int = 0) -> PhantomSample:
    d = Path(directory)
    t2w = read_rt1(d / "t2w.rt1")
    adc = read_rt1(d / "adc.rt1")
    mask = read_mask_pgm(d / "mask.pgm")
    if t2w.shape != adc.shape or t2w.shape[1:] != mask.shape or t2w.shape[0] != 1:
        raise DataError(f"{d}: inconsistent shapes t2w {t2w.shape}, adc {adc.shape}, mask {mask.shape}")
    return PhantomSample(t2w, adc, mask, seed)


def batches(indices: Sequence[int], batch_size: int) -> list[list[int]]:
    return [list(indices[i : i + batch_size]) for i in range(0, len(indices), batch_size)]
