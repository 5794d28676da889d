"""Command-line surface.

Subcommands: gen-data, train, eval, bench, params, ablate, dump-features.
Options may come from a JSON config file (--config); explicit flags
override file values, which override defaults. The JSON key set is flat
and mirrors the long flag names with underscores (e.g. "input_size").
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from . import __version__
from .ablation import run_ablation, write_results_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .core import Tensor
from .data import DatasetSpec, gen_synthetic_dataset, load_dataset_dir, load_image_ppm, save_dataset
from .detector import ModelConfig, build_model, param_report
from .errors import CheckpointError, ConfigError, DataError
from .evaluation import latency_bench
from .featuremaps import EXPORT_SITES, export_feature_maps
from .training import TrainConfig, evaluate_detector, train


def _merge(args: argparse.Namespace, keys: Sequence[str]) -> dict:
    """defaults < config file < explicit flags."""
    merged: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            try:
                file_cfg = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise ConfigError(f"config file has unknown keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


_MODEL_KEYS = ("scale", "teacher", "strategy", "num_classes", "input_size", "seed")
_TRAIN_KEYS = (
    "learning_rate",
    "momentum",
    "epochs",
    "batch_size",
    "lambda_box",
    "lambda_obj",
    "lambda_cls",
    "seed",
    "t_small",
    "t_med",
    "schedule",
    "grad_clip",
    "eval_every",
    "stop_map50",
)


def _model_config(args) -> ModelConfig:
    merged = _merge(args, _MODEL_KEYS + _TRAIN_KEYS)
    return ModelConfig(**{k: merged[k] for k in _MODEL_KEYS if k in merged})


def _train_config(args) -> TrainConfig:
    merged = _merge(args, _MODEL_KEYS + _TRAIN_KEYS)
    return TrainConfig(**{k: merged[k] for k in _TRAIN_KEYS if k in merged})


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--scale", choices=["s", "m", "l", "l-full"])
    p.add_argument("--teacher")
    p.add_argument("--strategy")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--seed", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda-box", dest="lambda_box", type=float)
    p.add_argument("--lambda-obj", dest="lambda_obj", type=float)
    p.add_argument("--lambda-cls", dest="lambda_cls", type=float)
    p.add_argument("--t-small", dest="t_small", type=float)
    p.add_argument("--t-med", dest="t_med", type=float)
    p.add_argument("--schedule", choices=["constant", "linear"])
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--stop-map50", dest="stop_map50", type=float)


def _write_history_csv(path: str, history) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "box", "obj", "cls", "total", "map50"])
        for r in history:
            writer.writerow(
                [
                    r.epoch,
                    repr(r.box),
                    repr(r.obj),
                    repr(r.cls),
                    repr(r.total),
                    "" if r.map50 is None else repr(r.map50),
                ]
            )


# ----------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        source="synthetic",
        seed=args.seed if args.seed is not None else 0,
        count=args.count,
        image_side=args.image_side,
        num_classes=args.num_classes if args.num_classes is not None else 2,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        min_size=args.min_size,
        max_size=args.max_size,
    )
    dataset = gen_synthetic_dataset(spec)
    save_dataset(dataset, args.out)
    print(
        f"wrote {len(dataset)} samples to {args.out} "
        f"({sum(len(l) for l in dataset.labels)} boxes, "
        f"{dataset.regenerated} regenerated)"
    )
    return 0


def cmd_train(args) -> int:
    model_config = _model_config(args)
    train_config = _train_config(args)
    train_set = load_dataset_dir(args.train_dir)
    val_set = load_dataset_dir(args.val_dir) if args.val_dir else None
    model, report = build_model(model_config)
    print(f"built {model_config.name}: {report.total} params "
          f"({report.trainable} trainable, {report.frozen} frozen)")
    history = train(model, train_set, train_config, val_set=val_set)
    save_checkpoint(model, args.out, step=len(history))
    if args.history:
        _write_history_csv(args.history, history)
    last = history[-1] if history else None
    if last is not None:
        map_part = f" map50={last.map50:.4f}" if last.map50 is not None else ""
        print(f"epoch {last.epoch}: total={last.total:.4f}{map_part}")
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset_dir(args.data_dir)
    metrics = evaluate_detector(
        model, dataset, conf_threshold=args.conf_threshold, nms_iou=args.nms_iou
    )
    if metrics is None:
        print("error: dataset has no ground truth; mAP undefined", file=sys.stderr)
        return 1
    print(f"map50 {metrics.map50:.6f}")
    print(f"map50_95 {metrics.map50_95:.6f}")
    for class_id, ap in sorted(metrics.per_class.items()):
        print(f"class {class_id} ap50 {ap:.6f}")
    return 0


def cmd_bench(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    report = latency_bench(
        model, model.config.input_size, warmup=args.warmup, runs=args.runs
    )
    print(
        f"warmup {report.warmup} runs {report.runs} "
        f"mean_ms {report.mean_ms:.3f} std_ms {report.std_ms:.3f} "
        f"fps {report.fps:.2f}"
    )
    return 0


def cmd_params(args) -> int:
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        config, report = model.config, param_report(model)
    else:
        config = _model_config(args)
        _, report = build_model(config)
    print(f"name {config.name}")
    print(f"total {report.total}")
    print(f"trainable {report.trainable}")
    print(f"frozen {report.frozen}")
    print(f"trainable_fraction {report.trainable_fraction:.4f}")
    return 0


def cmd_ablate(args) -> int:
    train_config = _train_config(args)
    scales = [s.strip() for s in args.scales.split(",") if s.strip()]
    teachers = [t.strip() for t in args.teachers.split(",") if t.strip()]
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise ConfigError("ablate: empty strategy list")
    train_set = load_dataset_dir(args.train_dir)
    val_set = load_dataset_dir(args.val_dir)
    records = run_ablation(
        scales,
        teachers,
        strategies,
        train_set,
        val_set,
        train_config,
        out_csv=args.out,
        num_classes=args.num_classes if args.num_classes is not None else 2,
        input_size=args.input_size if args.input_size is not None else 64,
    )
    failures = sum(1 for r in records if r.status != "ok")
    print(f"wrote {len(records)} rows to {args.out} ({failures} failed cells)")
    return 0


def cmd_dump_features(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    image = load_image_ppm(args.image)
    size = model.config.input_size
    if image.shape != (3, size, size):
        raise DataError(
            f"image shape {image.shape} does not match model input "
            f"(3, {size}, {size})"
        )
    paths = export_feature_maps(
        model,
        Tensor(image[None]),
        args.site,
        args.out,
        color=args.color,
        max_channels=args.max_channels,
    )
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitfuse",
        description="Frozen-ViT feature-injection detector: data, training, "
        "evaluation, ablation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--image-side", dest="image_side", type=int, default=64)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=2)
    p.add_argument("--min-objects", dest="min_objects", type=int, default=1)
    p.add_argument("--max-objects", dest="max_objects", type=int, default=2)
    p.add_argument("--min-size", dest="min_size", type=int, default=10)
    p.add_argument("--max-size", dest="max_size", type=int, default=22)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--train-dir", dest="train_dir", required=True)
    p.add_argument("--val-dir", dest="val_dir")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="per-epoch CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-dir", dest="data_dir", required=True)
    p.add_argument("--conf-threshold", dest="conf_threshold", type=float, default=0.05)
    p.add_argument("--nms-iou", dest="nms_iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure forward latency and FPS")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=30)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="parameter accounting for a config or checkpoint")
    _add_model_flags(p)
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", help="run an ablation matrix to CSV")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--scales", required=True, help="comma-separated, e.g. s,m")
    p.add_argument("--teachers", required=True, help="comma-separated variants")
    p.add_argument("--strategies", required=True, help="comma-separated, must include none")
    p.add_argument("--train-dir", dest="train_dir", required=True)
    p.add_argument("--val-dir", dest="val_dir", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="export activation maps as PGM/PPM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--site", required=True, choices=list(EXPORT_SITES))
    p.add_argument("--out", required=True)
    p.add_argument("--color", action="store_true", help="also write pseudocolor PPM")
    p.add_argument("--max-channels", dest="max_channels", type=int)
    p.set_defaults(func=cmd_dump_features)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
