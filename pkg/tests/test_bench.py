import csv

import numpy as np
import pytest

from bypasstrack.bench import (
    BENCH_COLUMNS,
    MIN_RUNS,
    MIN_WARMUP,
    BenchRecord,
    bench_blocks,
    bench_models,
    bench_problems,
    forced_skip_layers,
    time_interleaved,
    write_bench_csv,
)
from bypasstrack.config import Config


def rec(name, ms):
    return BenchRecord(name, ms, ms, ms, 0, 0, 0.0, MIN_RUNS)


def tiny_config():
    return Config().with_updates(**{
        "model.d": 8, "model.depth": 3, "model.n_heads": 2, "model.patch": 4,
        "model.template_size": 8, "model.search_size": 16, "model.head_width": 4, "model.head_stages": 1,
        "bypass.n_enf": 1, "prune.mu": 0.5,
    })


class TestProblems:
    def test_clean(self):
        records = [rec("block:dense", 0.41), rec("block:+bdm", 0.46), rec("block:+bdm+vtp", 0.37),
                   rec("block:bypassed", 0.05), rec("forced-skip-0", 3.0), rec("forced-skip-1", 2.6),
                   rec("forced-skip-2", 2.6)]
        assert bench_problems(records) == []

    def test_order_violation(self):
        records = [rec("block:dense", 0.41), rec("block:+bdm", 0.40), rec("block:+bdm+vtp", 0.37)]
        assert len(bench_problems(records)) == 1

    def test_pruned_not_faster(self):
        records = [rec("block:dense", 0.41), rec("block:+bdm", 0.46), rec("block:+bdm+vtp", 0.42)]
        assert "order" in bench_problems(records)[0]

    def test_small_bypass_saving(self):
        problems = bench_problems([rec("block:+bdm+vtp", 0.37), rec("block:bypassed", 0.2)])
        assert problems == ["bypassing saves less than half of the block time"]

    def test_monotonicity(self):
        records = [rec("forced-skip-0", 3.0), rec("forced-skip-1", 3.1), rec("forced-skip-2", 2.0)]
        assert bench_problems(records) == ["forced-skip-1 slower than forced-skip-0"]

    def test_numeric_order_of_k(self):
        # k = 10 sorts after k = 9, not after k = 1
        records = [rec(f"forced-skip-{k}", 10.0 - k * 0.5) for k in (1, 9, 10)]
        assert bench_problems(records) == []


class TestHelpers:
    def test_forced_skip_layers(self):
        assert forced_skip_layers(6, 2, 0) == ()
        assert forced_skip_layers(6, 2, 2) == (5, 6)
        assert forced_skip_layers(6, 2, 4) == (3, 4, 5, 6)
        with pytest.raises(ValueError):
            forced_skip_layers(6, 2, 5)

    def test_minimum_sampling(self):
        with pytest.raises(ValueError):
            time_interleaved({"a": lambda: None}, warmup=MIN_WARMUP - 1)
        with pytest.raises(ValueError):
            time_interleaved({"a": lambda: None}, runs=MIN_RUNS - 1)

    def test_interleaved_counts(self):
        calls = {"a": 0, "b": 0}

        def make(k):
            def fn():
                calls[k] += 1
            return fn

        out = time_interleaved({"a": make("a"), "b": make("b")})
        assert out["a"].shape == (MIN_RUNS,) and np.all(out["a"] >= 0)
        assert calls["a"] == calls["b"] >= MIN_WARMUP + MIN_RUNS

    def test_csv(self, tmp_path):
        write_bench_csv([rec("block:dense", 0.5)], tmp_path / "b.csv")
        rows = list(csv.DictReader(open(tmp_path / "b.csv")))
        assert tuple(rows[0]) == BENCH_COLUMNS and rows[0]["median_ms"] == "0.500000"


class TestRuns:
    def test_block_records(self):
        records = bench_blocks(tiny_config())
        names = [r.scenario for r in records]
        assert names == ["block:dense", "block:+bdm", "block:vtp", "block:+bdm+vtp", "block:bypassed"]
        by = {r.scenario: r for r in records}
        assert by["block:vtp"].flops < by["block:dense"].flops < by["block:+bdm"].flops
        assert all(r.runs == MIN_RUNS and r.p10_ms <= r.median_ms <= r.p90_ms for r in records)

    def test_model_records(self):
        cfg = tiny_config()
        records = bench_models(cfg, scenarios=["dense", "forced-skip-k"])
        names = [r.scenario for r in records]
        assert names == ["dense", "forced-skip-0", "forced-skip-1", "forced-skip-2"]
        skips = [r for r in records if r.scenario.startswith("forced")]
        assert [r.mean_executed_blocks for r in skips] == [3.0, 2.0, 1.0]
        assert skips[0].flops > skips[1].flops > skips[2].flops
