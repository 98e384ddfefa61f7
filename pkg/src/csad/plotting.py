"""Report figures, rendered off-screen to PNG files.

PNG output carries no software or timestamp metadata, so rerunning a
command with the same inputs writes byte-identical figures.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}

plt.rcParams.update(
    {
        "figure.dpi": 100,
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def loss_curves(history: Sequence[Mapping], path) -> Path:
    """Per-epoch loss components and validation Dice from training log records."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=(8, 3))
    for key in ("total", "dice", "wbce", "csad"):
        ax_loss.plot(epochs, [r[key] for r in history], label=key, marker=".")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.legend(frameon=False)
    ax_dice.plot(epochs, [r["val_dice"] for r in history], color="k", marker=".")
    ax_dice.set_xlabel("epoch")
    ax_dice.set_ylabel("validation Dice (%)")
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(rows: Sequence[Mapping], path) -> Path:
    """Bar chart of mean validation Dice with one standard deviation error bars."""
    names = [r["variant"] for r in rows]
    means = [r["dice_mean"] for r in rows]
    stds = [r["dice_std"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows)), 3))
    x = np.arange(len(rows))
    ax.bar(x, means, yerr=stds, capsize=3, color="0.6", edgecolor="k", linewidth=0.5)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("validation Dice (%)")
    fig.tight_layout()
    return _save(fig, path)


def attention_grid(maps_t2w: Sequence[np.ndarray], maps_adc: Sequence[np.ndarray], path, images=None) -> Path:
    """One row per stream, one column per stage; optional input images in a leading column."""
    n = len(maps_t2w)
    lead = 1 if images is not None else 0
    fig, axes = plt.subplots(2, n + lead, figsize=(1.6 * (n + lead), 3.4), squeeze=False)
    for row, (label, maps) in enumerate((("T2W", maps_t2w), ("ADC", maps_adc))):
        if images is not None:
            axes[row, 0].imshow(images[row], cmap="gray")
            axes[row, 0].set_title(f"{label} input", fontsize=8)
        for s, m in enumerate(maps):
            ax = axes[row, s + lead]
            ax.imshow(m, cmap="magma")
            ax.set_title(f"{label} stage {s + 1}", fontsize=8)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def metrics_boxplot(report, path) -> Path:
    """Distribution of the per-sample metrics of a :class:`MetricsReport`."""
    from .objectives import METRIC_NAMES

    data = []
    for name in METRIC_NAMES:
        v = np.array(report.values(name), dtype=np.float64)
        data.append(v[np.isfinite(v)])
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.boxplot(data, showmeans=True)
    ax.set_xticks(range(1, len(METRIC_NAMES) + 1))
    ax.set_xticklabels(METRIC_NAMES)
    ax.set_ylabel("%")
    fig.tight_layout()
    return _save(fig, path)
