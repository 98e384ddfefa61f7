"""Deterministic training and evaluation over a dataset directory."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError
from .net import Model, NetConfig, TrainConfig, backward_and_step, config_to_dict, forward, init_model
from .objectives import MetricsReport, evaluate, threshold_mask
from .phantom import Dataset, PhantomSample, augment, batches, derive_seed

SHUFFLE_DOMAIN = 0x5F1
EPOCH_AUG_DOMAIN = 0xA07
EVAL_BATCH = 8


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)


def _stack(samples: Sequence[PhantomSample]):
    return (
        np.stack([s.t2w for s in samples]),
        np.stack([s.adc for s in samples]),
        np.stack([s.mask for s in samples]),
    )


def predict_probabilities(model: Model, samples: Sequence[PhantomSample]) -> np.ndarray:
    """Predicted probability maps ``(N, H, W)``, computed in fixed-size chunks in dataset order."""
    out = []
    for chunk in batches(range(len(samples)), EVAL_BATCH):
        t2w, adc, _ = _stack([samples[i] for i in chunk])
        out.append(forward(model, t2w, adc, with_attention=False).pred)
    return np.concatenate(out, axis=0)


def mean_dice(model: Model, samples: Sequence[PhantomSample]) -> float:
    """Mean hard-mask Dice (percent) of the model over ``samples``."""
    if not samples:
        return float("nan")
    probs = predict_probabilities(model, samples)
    masks = threshold_mask(probs, model.config.threshold)
    return float(np.mean([evaluate(m, s.mask)[0] for m, s in zip(masks, samples)]))


def evaluate_model(model: Model, samples: Sequence[PhantomSample], **meta) -> MetricsReport:
    probs = predict_probabilities(model, samples)
    masks = threshold_mask(probs, model.config.threshold)
    return MetricsReport.from_masks(list(masks), [s.mask for s in samples], **meta)


def train(
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a freshly initialised model; every step is a pure function of the seeds and the data.

    Each epoch shuffles the training indices with a seeded permutation and,
    if enabled, augments every sample with a seed derived from
    ``(seed, epoch, sample index)``.  One record per epoch is passed to ``log``.
    """
    if tuple(dataset.size) != tuple(net_cfg.input_size):
        raise DataError(f"dataset images are {dataset.size}, network expects {net_cfg.input_size}")
    model = init_model(net_cfg, train_cfg.seed)
    train_idx = dataset.indices("train", train_cfg.fold)
    val_idx = dataset.indices("val", train_cfg.fold)
    val_samples = [dataset[k] for k in val_idx]
    shuffle = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(train_cfg.seed, spawn_key=(SHUFFLE_DOMAIN,)))
    )
    result = TrainResult(model)
    for epoch in range(1, train_cfg.epochs + 1):
        order = [train_idx[i] for i in shuffle.permutation(len(train_idx))]
        sums = {"dice": 0.0, "wbce": 0.0, "csad": 0.0, "total": 0.0}
        csad_terms = 0
        n_batches = 0
        for chunk in batches(order, train_cfg.batch_size):
            samples = [dataset[k] for k in chunk]
            if train_cfg.augment:
                samples = [
                    augment(s, derive_seed(train_cfg.seed, EPOCH_AUG_DOMAIN, epoch, k)) for s, k in zip(samples, chunk)
                ]
            _, breakdown = backward_and_step(model, [(s.t2w, s.adc, s.mask) for s in samples], train_cfg)
            for key, value in breakdown.as_dict().items():
                sums[key] += value
            csad_terms = breakdown.csad_terms
            n_batches += 1
        record = {"event": "epoch", "epoch": epoch}
        record.update({k: v / n_batches for k, v in sums.items()})
        record["csad_terms"] = csad_terms
        record["val_dice"] = mean_dice(model, val_samples)
        result.history.append(record)
        if log is not None:
            log(record)
    return result


class JsonLinesLog:
    """Line-delimited JSON training log.  Only the header line carries a timestamp."""

    def __init__(self, path, header: dict):
        self.path = Path(path)
        self._fh = self.path.open("w")
        self.write({"event": "start", "time": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **header})

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    __call__ = write

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def run_header(net_cfg: NetConfig, train_cfg: TrainConfig) -> dict:
    return {"config": config_to_dict(net_cfg, train_cfg)}
