"""Two-stream encoder / fusion / decoder segmentation network.

Layout for ``stages = S`` and ``base_channels = B``::

    per stream, stage s = 1..S (width B * 2**(s-1)):
        conv3x3 -> relu -> conv3x3 -> relu   -> attention map (stage output)
        maxpool 2x2                          (all stages except the last)
    fusion of the two last-stage outputs     (SCFF, or channel concatenation)
    decoder, S-1 blocks: upsample x2 -> conv3x3 -> relu
    head: conv1x1 -> logistic

Every tensor in the forward pass carries a leading batch axis.  Gradients are
averaged over the batch.
"""
from __future__ import annotations

import io
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import Scheme, amgb_backward_cached, amgb_forward, build_distill_plan, l_csad
from .errors import ConfigError, DataError, NumericError, ParameterError, ShapeError
from .fileio import read_rt1_stream, rt1_bytes
from .objectives import (
    LossConfig,
    dice_loss,
    dice_loss_backward,
    threshold_mask,
    wbce_loss,
    wbce_loss_backward,
)
from .scff import scff_backward, scff_forward

CONV = "gemm"
INIT_DOMAIN = 0x1A17


@dataclass(frozen=True)
class NetConfig:
    input_size: tuple[int, int] = (64, 64)
    stages: int = 5
    base_channels: int = 8
    scheme: Scheme = Scheme.ILC
    fusion: str = "scff"  # "scff" or "concat"
    proj_channels: int | None = None  # SCFF projection width; None -> half the last-stage width
    distill_gradient_mode: str = "both"
    threshold: float = 0.5
    standardize_inputs: bool = True  # per-image zero mean / unit variance before the first conv
    head_bias_init: float = -3.0  # initial logit of the head; -3 puts the prior near 5% foreground

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be [H, W], got {self.input_size}")
        if self.stages < 2:
            raise ConfigError(f"stages must be >= 2, got {self.stages}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        div = 2 ** (self.stages - 1)
        if any(v < 1 or v % div for v in self.input_size):
            raise ConfigError(f"input_size {self.input_size} must be divisible by 2**(stages-1) = {div}")
        if self.fusion not in ("scff", "concat"):
            raise ConfigError(f"fusion must be 'scff' or 'concat', got {self.fusion!r}")
        if self.distill_gradient_mode not in ("both", "student_only"):
            raise ConfigError(f"distill_gradient_mode must be 'both' or 'student_only', got {self.distill_gradient_mode!r}")
        if self.proj_channels is not None and self.proj_channels < 1:
            raise ConfigError(f"proj_channels must be >= 1, got {self.proj_channels}")

    def width(self, stage: int) -> int:
        """Channel count of encoder stage ``stage`` (1-based)."""
        return self.base_channels * 2 ** (stage - 1)

    @property
    def proj_width(self) -> int:
        if self.proj_channels is not None:
            return self.proj_channels
        return max(1, self.width(self.stages) // 2)

    @property
    def fused_width(self) -> int:
        if self.fusion == "scff":
            return 2 * self.proj_width
        return 2 * self.width(self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["scheme"] = self.scheme.value
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    learning_rate: float = 0.01
    seed: int = 0
    augment: bool = True
    fold: int | None = None  # validate on this fold and train on the rest; None -> manifest split
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    def to_dict(self) -> dict:
        d = asdict(self)
        loss = d.pop("loss")
        d["loss"] = {"alpha": loss["alpha"], "beta": loss["beta"], "sigma": loss["sigma"], "lambda": loss["lam"]}
        return d


def _from_dict(cls, data: dict, where: str, renames: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    renames = renames or {}
    known = {renames.get(f.name, f.name): f.name for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    try:
        return cls(**{known[k]: v for k, v in data.items()})
    except (TypeError, ParameterError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(doc: dict) -> tuple[NetConfig, TrainConfig]:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object with 'net' and 'train' sections")
    unknown = sorted(set(doc) - {"net", "train"})
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(unknown)}")
    net = _from_dict(NetConfig, doc.get("net", {}), "net")
    train_doc = dict(doc.get("train", {}))
    loss = _from_dict(LossConfig, train_doc.pop("loss", {}), "train.loss", {"lam": "lambda"})
    train = _from_dict(TrainConfig, train_doc, "train")
    return net, replace(train, loss=loss)


def config_to_dict(net: NetConfig, train: TrainConfig) -> dict:
    return {"net": net.to_dict(), "train": train.to_dict()}


def load_config(path) -> tuple[NetConfig, TrainConfig]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(doc)


def param_rng(seed: int, name: str, domain: int = INIT_DOMAIN) -> np.random.Generator:
    """Independent PCG64 stream per (seed, parameter name)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(domain, zlib.crc32(name.encode())))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Model:
    config: NetConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for stream in ("t2w", "adc"):
        c_in = 1
        for s in range(1, cfg.stages + 1):
            c = cfg.width(s)
            shapes[f"enc.{stream}.{s}.conv1.w"] = (c, c_in, 3, 3)
            shapes[f"enc.{stream}.{s}.conv1.b"] = (c,)
            shapes[f"enc.{stream}.{s}.conv2.w"] = (c, c, 3, 3)
            shapes[f"enc.{stream}.{s}.conv2.b"] = (c,)
            c_in = c
    if cfg.fusion == "scff":
        shapes["scff.proj.w"] = (cfg.proj_width, cfg.width(cfg.stages), 1, 1)
    c_in = cfg.fused_width
    for k in range(1, cfg.stages):
        c = cfg.width(cfg.stages - k)
        shapes[f"dec.{k}.w"] = (c, c_in, 3, 3)
        shapes[f"dec.{k}.b"] = (c,)
        c_in = c
    shapes["head.w"] = (1, c_in, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_model(cfg: NetConfig, seed: int = 0) -> Model:
    """Fan-in scaled uniform weights, zero biases except the head.

    Layers followed by a relu use the bound ``sqrt(6 / fan_in)``; the linear
    projection and the head use ``sqrt(3 / fan_in)``.  The head bias starts at
    ``cfg.head_bias_init`` so the initial prediction matches a small lesion
    prior instead of 0.5 everywhere.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.full(shape, cfg.head_bias_init if name == "head.b" else 0.0)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 3.0 if name.startswith(("scff.", "head.")) else 6.0
        bound = np.sqrt(gain / fan_in)
        params[name] = param_rng(seed, name).uniform(-bound, bound, size=shape)
    return Model(cfg, params)


def _conv_bias(x, w, b, padding):
    out, cols = T.conv2d_gemm(x, w, padding=padding)
    out += b[None, :, None, None]
    return out, cols


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image of an (N,1,H,W) batch; constant images map to zero."""
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    std = x.std(axis=(1, 2, 3), keepdims=True)
    return (x - mean) / np.maximum(std, 1e-8)


def _batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"modality input must be (1,H,W) or (N,1,H,W), got {x.shape}")


@dataclass
class ForwardResult:
    pred: np.ndarray  # (N,H,W) probabilities, or (H,W) for an unbatched call
    attn_t2w: list[np.ndarray]  # per stage, (N,H,W) or (H,W)
    attn_adc: list[np.ndarray]
    cache: dict


def _encode(model: Model, stream: str, x: np.ndarray) -> list[tuple]:
    cfg, p = model.config, model.params
    trace = []
    h = x
    for s in range(1, cfg.stages + 1):
        inp = h if s == 1 else T.maxpool2x2(h)
        pre = f"enc.{stream}.{s}"
        z1, cols1 = _conv_bias(inp, p[pre + ".conv1.w"], p[pre + ".conv1.b"], 1)
        a1 = T.relu(z1)
        z2, cols2 = _conv_bias(a1, p[pre + ".conv2.w"], p[pre + ".conv2.b"], 1)
        h = T.relu(z2)
        trace.append((inp, z1, cols1, a1, z2, cols2, h))
    return trace


def forward(model: Model, t2w: np.ndarray, adc: np.ndarray, with_attention: bool = True) -> ForwardResult:
    cfg, p = model.config, model.params
    xt, squeeze = _batch(t2w)
    xa, _ = _batch(adc)
    expected = (1,) + cfg.input_size
    if xt.shape[1:] != expected or xa.shape != xt.shape:
        raise ShapeError(f"inputs {xt.shape[1:]} / {xa.shape[1:]} do not match configured {expected}")
    n = xt.shape[0]
    th, tw = cfg.input_size
    if cfg.standardize_inputs:
        xt, xa = standardize(xt), standardize(xa)
    enc = {"t2w": _encode(model, "t2w", xt), "adc": _encode(model, "adc", xa)}
    attn = {k: [] for k in enc}
    attn_caches = {k: [] for k in enc}
    if with_attention:
        for k, trace in enc.items():
            for stage in trace:
                a, c = amgb_forward(stage[-1], th, tw)
                attn[k].append(a)
                attn_caches[k].append(c)

    ft, fa = enc["t2w"][-1][-1], enc["adc"][-1][-1]
    fusion_caches = []
    if cfg.fusion == "scff":
        fused = []
        for i in range(n):
            out, c = scff_forward(ft[i], fa[i], p["scff.proj.w"])
            fused.append(out)
            fusion_caches.append(c)
        d = np.stack(fused)
    else:
        d = np.concatenate([ft, fa], axis=1)

    dec_trace = []
    for k in range(1, cfg.stages):
        u = T.bilinear_upsample(d, 2 * d.shape[-2], 2 * d.shape[-1])
        z, cols = _conv_bias(u, p[f"dec.{k}.w"], p[f"dec.{k}.b"], 1)
        dec_trace.append((d.shape, u, z, cols))
        d = T.relu(z)
    logits, head_cols = _conv_bias(d, p["head.w"], p["head.b"], 0)
    pred = T.sigmoid(logits[:, 0])

    cache = {
        "enc": enc,
        "attn": attn_caches,
        "fusion": fusion_caches,
        "dec": dec_trace,
        "head": (d, head_cols),
        "pred": pred,
    }
    if squeeze:
        return ForwardResult(pred[0], [a[0] for a in attn["t2w"]], [a[0] for a in attn["adc"]], cache)
    return ForwardResult(pred, attn["t2w"], attn["adc"], cache)


def predict_mask(model: Model, t2w, adc, threshold: float | None = None) -> np.ndarray:
    thr = model.config.threshold if threshold is None else threshold
    return threshold_mask(forward(model, t2w, adc, with_attention=False).pred, thr)


@dataclass
class LossBreakdown:
    dice: float
    wbce: float
    csad: float
    total: float
    csad_terms: int = 0

    def as_dict(self) -> dict:
        return {"dice": self.dice, "wbce": self.wbce, "csad": self.csad, "total": self.total}


def loss_and_gradients(
    model: Model,
    t2w: np.ndarray,
    adc: np.ndarray,
    masks: np.ndarray,
    loss_cfg: LossConfig = LossConfig(),
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Batch-mean hybrid loss and its gradient for every parameter."""
    cfg, p = model.config, model.params
    xt, squeeze = _batch(t2w)
    xa, _ = _batch(adc)
    masks = np.asarray(masks, dtype=np.float64)
    if squeeze:
        masks = masks[None]
    n = xt.shape[0]
    if masks.shape != (n,) + cfg.input_size:
        raise ShapeError(f"masks {masks.shape} do not match batch of {n} inputs of size {cfg.input_size}")
    plan = build_distill_plan(cfg.scheme, cfg.stages)
    distill = len(plan) > 0 and loss_cfg.alpha > 0
    res = forward(model, xt, xa, with_attention=distill)
    pred, cache = res.pred, res.cache

    dice_v = wbce_v = csad_v = 0.0
    grad_pred = np.empty_like(pred)
    attn_grads = {k: [np.zeros_like(a) for a in res.attn_t2w] for k in ("t2w", "adc")} if distill else None
    terms = 0
    for i in range(n):
        dice_v += dice_loss(pred[i], masks[i], loss_cfg.sigma)
        wbce_v += wbce_loss(pred[i], masks[i], loss_cfg.lam)
        grad_pred[i] = dice_loss_backward(pred[i], masks[i], loss_cfg.sigma) + loss_cfg.beta * wbce_loss_backward(
            pred[i], masks[i], loss_cfg.lam
        )
        if distill:
            cs = l_csad(
                [a[i] for a in res.attn_t2w],
                [a[i] for a in res.attn_adc],
                plan,
                cfg.distill_gradient_mode,
            )
            if cs.n_terms != len(plan):
                raise AssertionError(f"{cs.n_terms} distillation terms for a plan of {len(plan)} pairs")
            terms = cs.n_terms
            csad_v += cs.value
            for s in range(cfg.stages):
                attn_grads["t2w"][s][i] = cs.grad_t2w[s]
                attn_grads["adc"][s][i] = cs.grad_adc[s]
    dice_v /= n
    wbce_v /= n
    csad_v /= n
    total = dice_v + loss_cfg.beta * wbce_v + loss_cfg.alpha * csad_v
    breakdown = LossBreakdown(dice_v, wbce_v, csad_v, total, terms)
    for name in ("dice", "wbce", "csad", "total"):
        if not np.isfinite(getattr(breakdown, name)):
            raise NumericError(f"non-finite {name} loss ({getattr(breakdown, name)}); training aborted")

    grads: dict[str, np.ndarray] = {}
    # head
    g_logits = (grad_pred * pred * (1.0 - pred) / n)[:, None]
    head_in, head_cols = cache["head"]
    g_d, grads["head.w"] = T.conv2d_backward(head_in, p["head.w"], g_logits, cols=head_cols)
    grads["head.b"] = g_logits.sum(axis=(0, 2, 3))
    # decoder
    for k in range(cfg.stages - 1, 0, -1):
        d_shape, u, z, cols = cache["dec"][k - 1]
        g_z = T.relu_backward(z, g_d)
        g_u, grads[f"dec.{k}.w"] = T.conv2d_backward(u, p[f"dec.{k}.w"], g_z, padding=1, cols=cols)
        grads[f"dec.{k}.b"] = g_z.sum(axis=(0, 2, 3))
        g_d = T.bilinear_upsample_backward(g_u, d_shape[-2], d_shape[-1])
    # fusion
    c_last = cfg.width(cfg.stages)
    if cfg.fusion == "scff":
        g_ft = np.empty_like(cache["enc"]["t2w"][-1][-1])
        g_fa = np.empty_like(g_ft)
        g_proj = np.zeros_like(p["scff.proj.w"])
        for i, fc in enumerate(cache["fusion"]):
            gt, ga, gp = scff_backward(fc, g_d[i])
            g_ft[i], g_fa[i] = gt, ga
            g_proj += gp
        grads["scff.proj.w"] = g_proj
    else:
        g_ft, g_fa = g_d[:, :c_last], g_d[:, c_last:]
    # encoders
    th, tw = cfg.input_size
    for stream, g_top in (("t2w", g_ft), ("adc", g_fa)):
        trace = cache["enc"][stream]
        g_h = g_top
        for s in range(cfg.stages, 0, -1):
            inp, z1, cols1, a1, z2, cols2, h = trace[s - 1]
            if distill:
                g_attn = loss_cfg.alpha * attn_grads[stream][s - 1] / n
                g_h = g_h + amgb_backward_cached(cache["attn"][stream][s - 1], g_attn)
            pre = f"enc.{stream}.{s}"
            g_z2 = T.relu_backward(z2, g_h)
            g_a1, grads[pre + ".conv2.w"] = T.conv2d_backward(a1, p[pre + ".conv2.w"], g_z2, padding=1, cols=cols2)
            grads[pre + ".conv2.b"] = g_z2.sum(axis=(0, 2, 3))
            g_z1 = T.relu_backward(z1, g_a1)
            g_inp, grads[pre + ".conv1.w"] = T.conv2d_backward(
                inp, p[pre + ".conv1.w"], g_z1, padding=1, cols=cols1, need_input_grad=s > 1
            )
            grads[pre + ".conv1.b"] = g_z1.sum(axis=(0, 2, 3))
            if s > 1:
                g_h = T.maxpool2x2_backward(trace[s - 2][-1], g_inp)
    return breakdown, grads


def total_loss_value(model: Model, t2w, adc, masks, loss_cfg: LossConfig = LossConfig()) -> float:
    """Forward-only batch-mean total loss (used by gradient checks)."""
    xt, squeeze = _batch(t2w)
    xa, _ = _batch(adc)
    masks = np.asarray(masks, dtype=np.float64)
    if squeeze:
        masks = masks[None]
    cfg = model.config
    plan = build_distill_plan(cfg.scheme, cfg.stages)
    res = forward(model, xt, xa)
    n = xt.shape[0]
    total = 0.0
    for i in range(n):
        total += dice_loss(res.pred[i], masks[i], loss_cfg.sigma)
        total += loss_cfg.beta * wbce_loss(res.pred[i], masks[i], loss_cfg.lam)
        if len(plan):
            total += loss_cfg.alpha * l_csad([a[i] for a in res.attn_t2w], [a[i] for a in res.attn_adc], plan).value
    return total / n


def sgd_step(model: Model, grads: dict[str, np.ndarray], lr: float) -> None:
    """In-place plain SGD: ``w <- w - lr * g``."""
    if lr == 0:
        return
    for name, g in grads.items():
        model.params[name] -= lr * g


def backward_and_step(model: Model, batch: Sequence, cfg: TrainConfig) -> tuple[Model, LossBreakdown]:
    """One SGD step on a batch of ``(t2w, adc, mask)`` triples.  Updates ``model`` in place."""
    if not batch:
        raise ParameterError("empty batch")
    t2w = np.stack([b[0] for b in batch])
    adc = np.stack([b[1] for b in batch])
    masks = np.stack([b[2] for b in batch])
    breakdown, grads = loss_and_gradients(model, t2w, adc, masks, cfg.loss)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    sgd_step(model, grads, cfg.learning_rate)
    return model, breakdown


CKPT_MAGIC = b"CSADCKPT1\n"


def checkpoint_bytes(model: Model) -> bytes:
    names = list(param_shapes(model.config))
    blobs = [rt1_bytes(model.params[k]) for k in names]
    entries, offset = [], 0
    for name, blob in zip(names, blobs):
        entries.append({"name": name, "shape": list(model.params[name].shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
    manifest = json.dumps({"net": model.config.to_dict(), "tensors": entries}, sort_keys=True).encode()
    return CKPT_MAGIC + f"{len(manifest)}\n".encode() + manifest + b"".join(blobs)


def save_checkpoint(path, model: Model) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if not data.startswith(CKPT_MAGIC):
        raise DataError(f"{path}: not a csad checkpoint")
    fh = io.BytesIO(data[len(CKPT_MAGIC) :])
    try:
        size = int(fh.readline())
        manifest = json.loads(fh.read(size))
    except ValueError as exc:
        raise DataError(f"{path}: corrupt checkpoint manifest") from exc
    try:
        cfg = _from_dict(NetConfig, manifest["net"], "checkpoint net config")
    except ConfigError as exc:
        raise DataError(f"{path}: {exc}") from exc
    params = {}
    for entry in manifest["tensors"]:
        arr = read_rt1_stream(fh, f"{path}:{entry['name']}")
        if list(arr.shape) != entry["shape"]:
            raise DataError(f"{path}: tensor {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
        params[entry["name"]] = arr
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise DataError(f"{path}: parameter set does not match the stored network configuration")
    return Model(cfg, params)
