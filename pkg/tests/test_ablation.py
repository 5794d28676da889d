"""Ablation matrix: CSV round trip, delta arithmetic, failure degradation."""

import numpy as np
import pytest

import vitfuse.ablation as ablation_mod
from vitfuse.ablation import (
    CSV_HEADER,
    ExperimentRecord,
    delta_percent,
    read_results_csv,
    run_ablation,
    write_results_csv,
)
from vitfuse.data import DatasetSpec, gen_synthetic_dataset
from vitfuse.errors import ConfigError
from vitfuse.training import TrainConfig


@pytest.fixture(scope="module")
def tiny_sets():
    train = gen_synthetic_dataset(DatasetSpec(seed=0, count=6))
    val = gen_synthetic_dataset(DatasetSpec(seed=1, count=4))
    return train, val


def quick_config():
    return TrainConfig(learning_rate=0.01, epochs=1, batch_size=4, eval_every=100)


class TestDeltaArithmetic:
    # published ablation pairs: recomputed deltas land within 0.1 point
    @pytest.mark.parametrize(
        "map50, baseline, published",
        [
            (0.5308, 0.4539, 16.9),
            (0.3270, 0.4539, -27.9),
            (0.5577, 0.4904, 13.7),
            (0.5363, 0.4854, 10.5),
            (0.2878, 0.4539, -36.6),
        ],
    )
    def test_published_pairs(self, map50, baseline, published):
        assert abs(delta_percent(map50, baseline) - published) <= 0.1

    def test_baseline_vs_itself_is_zero(self):
        assert delta_percent(0.4539, 0.4539) == 0.0


class TestCsvRoundTrip:
    def test_fields_survive_exactly(self, tmp_path):
        records = [
            ExperimentRecord(
                name="S-toytiny-triple", scale="s", teacher="toy-tiny",
                strategy="triple", map50=0.8125, map5095=0.4031173,
                latency_ms=12.125, fps=82.47422680412372,
                total_params=3026507, trainable_params=2959115,
                frozen_params=67392, delta_pct=-3.130495, status="ok",
            ),
            ExperimentRecord(
                name="M-toytiny-dualp3p4", scale="m", teacher="toy-tiny",
                strategy="dualp3p4", status="error: non-finite loss",
            ),
        ]
        path = str(tmp_path / "results.csv")
        write_results_csv(path, records)
        back = read_results_csv(path)
        assert back == records

    def test_header_fixed(self, tmp_path):
        path = str(tmp_path / "r.csv")
        write_results_csv(path, [])
        with open(path) as f:
            assert f.readline().strip() == ",".join(CSV_HEADER)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ConfigError, match="header"):
            read_results_csv(str(path))


class TestRunAblation:
    def test_two_scales_three_strategies_six_rows(self, tiny_sets, tmp_path):
        train, val = tiny_sets
        path = str(tmp_path / "matrix.csv")
        records = run_ablation(
            ["s", "m"], ["toy-tiny"], ["none", "singlep3", "dualp0p3"],
            train, val, quick_config(), out_csv=path,
        )
        assert len(records) == 6
        assert [r.scale for r in records] == ["s", "s", "s", "m", "m", "m"]
        assert [r.strategy for r in records] == ["none", "singlep3", "dualp0p3"] * 2
        baseline_rows = [r for r in records if r.strategy == "none"]
        assert all(r.teacher == "none" for r in baseline_rows)
        assert all(r.delta_pct == 0.0 for r in baseline_rows if r.status == "ok")
        assert read_results_csv(path) == records

    def test_deltas_anchor_to_same_scale_baseline(self, tiny_sets):
        train, val = tiny_sets
        records = run_ablation(
            ["s"], ["toy-tiny"], ["none", "singlep3"],
            train, val, quick_config(),
        )
        base, injected = records
        if base.status == "ok" and injected.status == "ok" and base.map50 > 0:
            expected = delta_percent(injected.map50, base.map50)
            assert injected.delta_pct == pytest.approx(expected)

    def test_missing_baseline_strategy_rejected(self, tiny_sets):
        train, val = tiny_sets
        with pytest.raises(ConfigError, match="baseline"):
            run_ablation(["s"], ["toy-tiny"], ["singlep3"], train, val, quick_config())

    def test_injected_failure_degrades_to_marked_row(self, tiny_sets, monkeypatch):
        train, val = tiny_sets
        real_train = ablation_mod.train

        def sabotaged(model, train_set, config, val_set=None):
            if model.config.strategy == "singlep3":
                raise RuntimeError("non-finite loss at epoch 0 batch 1")
            return real_train(model, train_set, config, val_set=val_set)

        monkeypatch.setattr(ablation_mod, "train", sabotaged)
        records = run_ablation(
            ["s"], ["toy-tiny"], ["none", "singlep3", "dualp3p4"],
            train, val, quick_config(),
        )
        assert len(records) == 3
        by_strategy = {r.strategy: r for r in records}
        assert by_strategy["none"].status == "ok"
        assert by_strategy["singlep3"].status.startswith("error:")
        assert by_strategy["singlep3"].map50 is None
        assert by_strategy["dualp3p4"].status == "ok"
        assert by_strategy["dualp3p4"].delta_pct is not None
