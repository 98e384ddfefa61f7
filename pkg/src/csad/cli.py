"""Command-line interface.

Exit status: 0 success, 2 configuration or argument error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError, ParameterError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# (row label, fusion, scheme); rows sharing a (fusion, scheme) pair share runs
ABLATION_ROWS = (
    ("Baseline", "concat", "NLC"),
    ("Baseline+SCFF", "scff", "NLC"),
    ("Baseline+CSAD", "concat", "ILC"),
    ("Proposed", "scff", "ILC"),
    ("NLC", "scff", "NLC"),
    ("PLC", "scff", "PLC"),
    ("ILC", "scff", "ILC"),
)
ABLATION_CHECKS = (("Proposed", "Baseline"), ("ILC", "NLC"))


def _split(text: str) -> tuple[float, float]:
    try:
        a, b = text.split("/")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected TRAIN/VAL percentages such as 80/20, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected SIZE or HxW, got {text!r}")


def cmd_gen_data(args) -> int:
    from .phantom import make_dataset

    h, w = args.size
    manifest = make_dataset(args.out, args.n, h, w, args.seed, args.split, args.folds)
    print(
        f"wrote {manifest['n']} samples ({h}x{w}) to {args.out}: "
        f"{len(manifest['split']['train'])} train / {len(manifest['split']['val'])} val, {args.folds} folds"
    )
    return EXIT_OK


def _load_configs(path):
    from .net import NetConfig, TrainConfig, load_config

    if path is None:
        return NetConfig(), TrainConfig()
    return load_config(path)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def cmd_train(args) -> int:
    from .net import save_checkpoint
    from .phantom import Dataset
    from .plotting import loss_curves
    from .training import JsonLinesLog, run_header, train

    net_cfg, train_cfg = _load_configs(args.config)
    if args.fold is not None:
        train_cfg = replace(train_cfg, fold=args.fold)
    dataset = Dataset(args.data)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")

    with JsonLinesLog(log_path, run_header(net_cfg, train_cfg)) as log:

        def record(r):
            log(r)
            _emit(r)

        result = train(net_cfg, train_cfg, dataset, record)
    save_checkpoint(out, result.model)
    figure = loss_curves(result.history, out.with_suffix(".loss.png"))
    print(f"checkpoint: {out}\nlog: {log_path}\nfigure: {figure}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .net import load_checkpoint
    from .phantom import Dataset
    from .plotting import metrics_boxplot
    from .training import evaluate_model

    model = load_checkpoint(args.ckpt)
    dataset = Dataset(args.data)
    if tuple(dataset.size) != tuple(model.config.input_size):
        raise DataError(f"dataset images are {dataset.size}, checkpoint expects {model.config.input_size}")
    idx = dataset.indices("val", args.fold)
    report = evaluate_model(
        model,
        [dataset[k] for k in idx],
        checkpoint=Path(args.ckpt).name,
        fold="split" if args.fold is None else args.fold,
        threshold=model.config.threshold,
    )
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        metrics_boxplot(report, out.with_suffix(".png"))
    return EXIT_OK


def run_ablation(dataset, out, epochs: int = 20, seeds: int = 3, base=None, resume: bool = False, emit=print):
    """Train every distinct (fusion, scheme) variant for ``seeds`` seeds and tabulate validation Dice.

    Returns ``(rows, violations)``; ``rows`` follows :data:`ABLATION_ROWS`.
    """
    from .net import NetConfig, TrainConfig, config_to_dict
    from .training import JsonLinesLog, run_header, train

    net_base, train_base = base if base is not None else (NetConfig(input_size=dataset.size), TrainConfig())
    train_base = replace(train_base, epochs=epochs)
    out = Path(out)
    results: dict[tuple[str, str], list[float]] = {}
    for _, fusion, scheme in ABLATION_ROWS:
        key = (fusion, scheme)
        if key in results:
            continue
        results[key] = []
        for seed in range(seeds):
            net_cfg = replace(net_base, fusion=fusion, scheme=scheme)
            train_cfg = replace(train_base, seed=seed)
            run_dir = out / "runs" / f"{fusion}-{scheme}-seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            done = run_dir / "result.json"
            cfg_doc = config_to_dict(net_cfg, train_cfg)
            if resume and done.exists():
                previous = json.loads(done.read_text())
                if previous.get("config") == json.loads(json.dumps(cfg_doc)):
                    results[key].append(previous["val_dice"])
                    emit(f"# reused {run_dir.name}: val_dice={previous['val_dice']:.2f}")
                    continue
            with JsonLinesLog(run_dir / "log.jsonl", run_header(net_cfg, train_cfg)) as log:
                history = train(net_cfg, train_cfg, dataset, log).history
            val = history[-1]["val_dice"]
            done.write_text(json.dumps({"config": cfg_doc, "val_dice": val}, sort_keys=True) + "\n")
            results[key].append(val)
            emit(f"# finished {run_dir.name}: val_dice={val:.2f}")
    rows = []
    for label, fusion, scheme in ABLATION_ROWS:
        v = np.array(results[(fusion, scheme)])
        rows.append(
            {
                "variant": label,
                "fusion": fusion,
                "scheme": scheme,
                "dice_mean": float(v.mean()),
                "dice_std": float(v.std()),
                "per_seed": [float(x) for x in v],
            }
        )
    by_name = {r["variant"]: r for r in rows}
    violations = [
        f"{hi} < {lo}"
        for hi, lo in ABLATION_CHECKS
        if not by_name[hi]["dice_mean"] >= by_name[lo]["dice_mean"]
    ]
    return rows, violations


def ablation_table(rows, violations) -> str:
    lines = ["variant\tfusion\tscheme\tdice_mean\tdice_std\tdice (mean ± std)\tper_seed"]
    for r in rows:
        seeds = ",".join(f"{v:.2f}" for v in r["per_seed"])
        lines.append(
            f"{r['variant']}\t{r['fusion']}\t{r['scheme']}\t{r['dice_mean']:.4f}\t{r['dice_std']:.4f}\t"
            f"{r['dice_mean']:.1f} ± {r['dice_std']:.1f}\t{seeds}"
        )
    for hi, lo in ABLATION_CHECKS:
        status = "VIOLATION" if f"{hi} < {lo}" in violations else "ok"
        lines.append(f"# check {hi} >= {lo}: {status}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    from .phantom import Dataset
    from .plotting import ablation_bars

    dataset = Dataset(args.data)
    base = None
    if args.config:
        net_cfg, train_cfg = _load_configs(args.config)
        base = (net_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, violations = run_ablation(
        dataset, out, args.epochs, args.seeds, base, args.resume, emit=lambda s: print(s, file=sys.stderr)
    )
    table = ablation_table(rows, violations)
    (out / "ablation.tsv").write_text(table)
    ablation_bars(rows, out / "ablation.png")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_export_attn(args) -> int:
    from .fileio import to_gray8, write_pgm, write_rt1
    from .net import forward, load_checkpoint
    from .phantom import load_sample
    from .plotting import attention_grid

    model = load_checkpoint(args.ckpt)
    sample = load_sample(args.sample)
    if sample.mask.shape != tuple(model.config.input_size):
        raise DataError(f"sample {args.sample} is {sample.mask.shape}, checkpoint expects {model.config.input_size}")
    res = forward(model, sample.t2w, sample.adc, with_attention=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for stream, maps in (("t2w", res.attn_t2w), ("adc", res.attn_adc)):
            for s, m in enumerate(maps, start=1):
                write_rt1(out / f"{stream}_stage{s}.rt1", m)
                write_pgm(out / f"{stream}_stage{s}.pgm", to_gray8(m))
        attention_grid(res.attn_t2w, res.attn_adc, out / "attention.png", images=(sample.t2w[0], sample.adc[0]))
    except OSError as exc:
        raise DataError(f"cannot write attention maps under {out}: {exc}") from exc
    print(f"wrote {len(res.attn_t2w)} attention maps per stream to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_gradcheck

    reports = run_gradcheck(args.threshold, args.instances, args.seed, emit=print)
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csad", description="Two-modality segmentation with cross-modal attention distillation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired-modality dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64), help="SIZE or HxW (default 64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", type=_split, default=(80.0, 20.0), help="train/val percentages (default 80/20)")
    g.add_argument("--folds", type=int, default=5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON config; defaults apply when omitted")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--fold", type=int, help="validate on this fold (overrides the config)")
    t.add_argument("--log", help="JSON-lines log path (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a validation set")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fold", type=int, help="held-out fold; the manifest split is used when omitted")
    e.add_argument("--out", help="write the report here (and a box plot next to it)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every ablation variant over several seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int, default=20)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--config", help="base JSON config; fusion and scheme are overridden per variant")
    a.add_argument("--resume", action="store_true", help="reuse finished runs with identical configs")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-attn", help="write per-stage attention maps for one sample")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--sample", required=True, help="sample directory containing t2w.rt1, adc.rt1, mask.pgm")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attn)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    c.add_argument("--threshold", type=float, default=1e-4)
    c.add_argument("--instances", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"csad {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"csad {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"csad {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
