"""Ablation matrix runner: build, train, evaluate, benchmark, account.

Each (scale, teacher, strategy) cell yields one CSV row. Baseline rows
(strategy "none") anchor the per-scale relative improvement column

    delta_pct = (map50 - baseline_map50) / baseline_map50 * 100

and are teacher-independent, so they run once per scale. A failing cell
degrades to a row with an error marker instead of aborting the sweep.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

from .detector import ModelConfig, build_model
from .errors import ConfigError
from .evaluation import latency_bench
from .training import Dataset, TrainConfig, evaluate_detector, train

CSV_HEADER = [
    "name",
    "scale",
    "teacher",
    "strategy",
    "map50",
    "map5095",
    "latency_ms",
    "fps",
    "total_params",
    "trainable_params",
    "frozen_params",
    "delta_pct",
    "status",
]


def delta_percent(map50: float, baseline_map50: float) -> float:
    """Relative percent change of mAP@0.5 against the same-scale baseline."""
    return (map50 - baseline_map50) / baseline_map50 * 100.0


@dataclass
class ExperimentRecord:
    name: str
    scale: str
    teacher: str
    strategy: str
    map50: Optional[float] = None
    map5095: Optional[float] = None
    latency_ms: Optional[float] = None
    fps: Optional[float] = None
    total_params: Optional[int] = None
    trainable_params: Optional[int] = None
    frozen_params: Optional[int] = None
    delta_pct: Optional[float] = None
    status: str = "ok"

    def to_row(self) -> list[str]:
        row = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                row.append("")
            elif isinstance(value, float):
                row.append(repr(value))
            else:
                row.append(str(value))
        return row

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "ExperimentRecord":
        if len(row) != len(CSV_HEADER):
            raise ConfigError(f"CSV row has {len(row)} fields, expected {len(CSV_HEADER)}")
        kwargs = {}
        for f, raw in zip(fields(cls), row):
            if raw == "" and f.name not in ("name", "scale", "teacher", "strategy", "status"):
                kwargs[f.name] = None
            elif f.name in ("total_params", "trainable_params", "frozen_params"):
                kwargs[f.name] = int(raw)
            elif f.name in ("map50", "map5095", "latency_ms", "fps", "delta_pct"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def write_results_csv(path: str, records: Sequence[ExperimentRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for record in records:
            writer.writerow(record.to_row())


def read_results_csv(path: str) -> list[ExperimentRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ConfigError(f"unexpected CSV header: {header}")
        return [ExperimentRecord.from_row(row) for row in reader]


def _run_cell(
    config: ModelConfig,
    train_set: Dataset,
    val_set: Dataset,
    train_config: TrainConfig,
    bench_warmup: int,
    bench_runs: int,
) -> ExperimentRecord:
    record = ExperimentRecord(
        name=config.name,
        scale=config.scale,
        teacher=config.teacher if config.strategy != "none" else "none",
        strategy=config.strategy,
    )
    model, report = build_model(config)
    record.total_params = report.total
    record.trainable_params = report.trainable
    record.frozen_params = report.frozen
    train(model, train_set, train_config, val_set=val_set)
    metrics = evaluate_detector(model, val_set)
    if metrics is None:
        raise ConfigError("validation set has no ground truth; mAP undefined")
    record.map50 = metrics.map50
    record.map5095 = metrics.map50_95
    bench = latency_bench(model, config.input_size, warmup=bench_warmup, runs=bench_runs)
    record.latency_ms = bench.mean_ms
    record.fps = bench.fps
    return record


def run_ablation(
    scales: Sequence[str],
    teachers: Sequence[str],
    strategies: Sequence[str],
    train_set: Dataset,
    val_set: Dataset,
    train_config: TrainConfig,
    out_csv: Optional[str] = None,
    num_classes: int = 2,
    input_size: int = 64,
    bench_warmup: int = 2,
    bench_runs: int = 5,
) -> list[ExperimentRecord]:
    """Run the full matrix, scale-major then strategy; returns all records."""
    if not scales or not teachers or not strategies:
        raise ConfigError("ablation needs at least one scale, teacher, and strategy")
    strategies = [s.lower() for s in strategies]
    if "none" not in strategies:
        raise ConfigError(
            "ablation requires strategy 'none' so every scale has a baseline row"
        )

    def run_one(scale: str, teacher: str, strategy: str) -> ExperimentRecord:
        try:
            config = ModelConfig(
                scale=scale,
                teacher=teacher,
                strategy=strategy,
                num_classes=num_classes,
                input_size=input_size,
                seed=train_config.seed,
            )
            return _run_cell(
                config, train_set, val_set, train_config, bench_warmup, bench_runs
            )
        except Exception as exc:  # a failed cell must not sink the sweep
            return ExperimentRecord(
                name=f"{scale.upper()}-{teacher}-{strategy}",
                scale=scale,
                teacher=teacher if strategy != "none" else "none",
                strategy=strategy,
                status=f"error: {exc}",
            )

    records: list[ExperimentRecord] = []
    for scale in scales:
        # baseline first (teacher-independent, one row per scale), so every
        # other cell can anchor its delta even when "none" is listed later
        baseline = run_one(scale, teachers[0], "none")
        baseline_map50 = baseline.map50 if baseline.status == "ok" else None
        if baseline_map50 is not None:
            baseline.delta_pct = 0.0
        for strategy in strategies:
            if strategy == "none":
                records.append(baseline)
                continue
            for teacher in teachers:
                record = run_one(scale, teacher, strategy)
                if (
                    record.status == "ok"
                    and baseline_map50 is not None
                    and not math.isclose(baseline_map50, 0.0)
                ):
                    record.delta_pct = delta_percent(record.map50, baseline_map50)
                records.append(record)

    if out_csv is not None:
        write_results_csv(out_csv, records)
    return records
