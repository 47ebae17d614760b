"""Unit tests for metrics, significance testing and result files."""

import csv
import json

import numpy as np
import pytest

from itl_sim.errors import ConfigurationError, DataError
from itl_sim.metrics_report import (
    RUN_COLUMNS,
    SUMMARY_COLUMNS,
    AccuracyMatrix,
    RepeatSet,
    RunResult,
    Verdict,
    aggregate,
    compare_repeats,
    emit_results,
    final_accuracy,
    load_runs,
    mean_accuracy,
    monotonicity,
    significance_vs_ft,
    summarize,
)


def matrix(*rows, visits=()):
    return AccuracyMatrix(np.array(rows, dtype=float), visits)


def run(method, seed, final, scenario="iid", first=None):
    first = final - 1.0 if first is None else first
    values = np.array([[first, final], [first, final]])
    return RunResult(method, scenario, seed, AccuracyMatrix(values, (1, 2)), config_hash="abc")


def loop_mean(values):
    total = 0.0
    for c in range(values.shape[0]):
        total += values[c, -1]
    return total / values.shape[0]


def loop_monotonicity(values):
    hits = 0
    for c in range(values.shape[0]):
        for i in range(1, values.shape[1]):
            hits += values[c, i] >= values[c, i - 1]
    return hits / (values.shape[0] * (values.shape[1] - 1))


@pytest.mark.unit
class TestMetrics:
    def test_mean_accuracy(self):
        assert mean_accuracy(matrix([0, 40], [0, 50], [0, 60], [0, 50], [0, 50])) == pytest.approx(50.0)

    @pytest.mark.parametrize("row, expected", [([1, 2, 3], 1.0), ([3, 2, 1], 0.0), ([1, 2, 1], 0.5)])
    def test_monotonicity_cases(self, row, expected):
        assert monotonicity(matrix(row)) == expected

    def test_ties_count_as_increase(self):
        assert monotonicity(matrix([5, 5, 5])) == 1.0

    def test_against_loops(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            values = rng.uniform(0, 100, size=(rng.integers(1, 6), rng.integers(2, 9)))
            m = AccuracyMatrix(values)
            assert abs(mean_accuracy(m) - loop_mean(values)) < 1e-12
            assert abs(monotonicity(m) - loop_monotonicity(values)) < 1e-12
            assert 0.0 <= monotonicity(m) <= 1.0

    def test_missing_final_cell(self):
        with pytest.raises(DataError, match="centers \\[2\\]"):
            mean_accuracy(matrix([1, 2], [3, np.nan]))

    def test_missing_cells_skipped_in_monotonicity(self):
        assert monotonicity(matrix([np.nan, 10, 5], [1, 2, 3])) == pytest.approx(2 / 3)

    def test_single_visit(self):
        with pytest.raises(DataError):
            monotonicity(matrix([1.0]))

    def test_visit_count_checked(self):
        with pytest.raises(DataError):
            AccuracyMatrix(np.zeros((2, 3)), (1, 2))

    def test_baseline_accuracy_overrides_matrix(self):
        result = RunResult("it", "iid", 0, matrix([90, 10], [20, 80]), extra={"accuracy": 50.0})
        assert final_accuracy(result) == 50.0


@pytest.mark.unit
class TestSignificance:
    def test_identical_samples(self):
        sig = compare_repeats([50, 52, 54], [50, 52, 54])
        assert sig.verdict is Verdict.NO
        assert sig.p_value == 1.0

    def test_clear_improvement_and_antisymmetry(self):
        rng = np.random.default_rng(0)
        high = 60 + 0.1 * rng.standard_normal(10)
        low = 50 + 0.1 * rng.standard_normal(10)
        assert significance_vs_ft(high, low).verdict is Verdict.YES_PLUS
        assert significance_vs_ft(low, high).verdict is Verdict.YES_MINUS

    def test_overlapping_samples(self):
        assert compare_repeats([50, 60, 55, 45], [52, 58, 50, 49]).verdict is Verdict.NO

    def test_constant_but_different(self):
        sig = compare_repeats([60.0, 60.0], [50.0, 50.0])
        assert sig.p_value == 0.0
        assert sig.verdict is Verdict.YES_PLUS

    def test_paired(self):
        base = np.array([50.0, 55.0, 60.0, 65.0, 70.0])
        shift = np.array([1.0, 1.1, 0.9, 1.05, 0.95])
        sig = compare_repeats(base + shift, base, test="paired")
        assert sig.verdict is Verdict.YES_PLUS
        assert compare_repeats(base + shift, base, test="welch").verdict is Verdict.NO

    def test_too_few_repeats(self):
        with pytest.raises(DataError):
            compare_repeats([1.0], [1.0, 2.0])

    def test_unknown_test(self):
        with pytest.raises(ConfigurationError):
            compare_repeats([1.0, 2.0], [1.0, 2.0], test="mann-whitney")


@pytest.mark.unit
class TestAggregation:
    def test_two_repeats(self):
        summary = aggregate(RepeatSet("ft", "iid", [run("ft", 0, 49.0), run("ft", 1, 51.0)]))
        assert summary.accuracy == pytest.approx(50.0)
        assert summary.std == pytest.approx(np.sqrt(2))
        assert summary.monotonicity == 1.0
        assert not summary.single_repeat

    def test_single_repeat_flagged(self):
        summary = aggregate(RepeatSet("ft", "iid", [run("ft", 0, 49.0)]))
        assert summary.std == 0.0
        assert summary.single_repeat

    def test_order_independent(self):
        runs = [run("ft", s, v) for s, v in enumerate([49.3, 51.7, 50.1, 48.9])]
        forward, backward = aggregate(RepeatSet("ft", "iid", runs)), aggregate(RepeatSet("ft", "iid", runs[::-1]))
        assert forward == backward

    def test_failed_runs_counted(self):
        runs = [run("ft", 0, 50.0), RunResult("ft", "iid", 1, failed=True, error="NumericalError: nan")]
        summary = aggregate(RepeatSet("ft", "iid", runs))
        assert (summary.n_repeats, summary.n_failed) == (1, 1)

    def test_summarize_against_reference(self):
        rng = np.random.default_rng(1)
        results = [run("ft", s, 50 + 0.1 * rng.standard_normal()) for s in range(5)]
        results += [run("lwf", s, 60 + 0.1 * rng.standard_normal()) for s in range(5)]
        summaries = summarize(results)
        assert [s.method for s in summaries] == ["ft", "lwf"]
        assert summaries[0].significance is None
        assert summaries[1].significance is Verdict.YES_PLUS
        assert summaries[1].p_value < 0.05

    def test_baselines_skip_monotonicity(self):
        result = RunResult("joint", "iid", 0, matrix([70.0]), extra={"accuracy": 70.0})
        assert np.isnan(aggregate(RepeatSet("joint", "iid", [result])).monotonicity)


@pytest.mark.unit
class TestResultFiles:
    def results(self):
        nan_run = RunResult("ft", "iid", 2, matrix([80.0, 82.0], [np.nan, 70.0], visits=(1, 2)), config_hash="abc")
        failed = RunResult("ewc", "iid", 0, failed=True, error="NumericalError: loss is nan", config_hash="abc")
        return [run("ft", 0, 50.0), run("ft", 1, 52.5), nan_run, failed]

    def test_json_round_trip(self, tmp_path):
        results = self.results()
        path = emit_results(results, tmp_path / "runs.json", "json")
        assert load_runs(path) == results

    def test_csv_round_trip(self, tmp_path):
        results = self.results()
        path = emit_results(results, tmp_path / "runs.csv")
        assert load_runs(path) == results

    def test_csv_keeps_baseline_extras(self, tmp_path):
        extra = {"accuracy": 50.0, "local": 85.0, "global": 50.0, "n_models": 2, "epochs": 6}
        runs = [
            RunResult("it", "iid", s, matrix([90, 10 + s], [20, 80], visits=(1, 2)), config_hash="abc", extra=extra)
            for s in (0, 1)
        ]
        reloaded = load_runs(emit_results(runs, tmp_path / "runs.csv"))
        assert reloaded == runs
        summary = aggregate(RepeatSet("it", "iid", reloaded))
        assert summary.accuracy == 50.0
        assert np.isnan(summary.monotonicity)

    def test_csv_layout(self, tmp_path):
        path = emit_results(self.results(), tmp_path / "runs.csv")
        assert path.read_bytes().count(b"\r\n") == 1 + 4 + 4 + 4 + 1
        with path.open(newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert tuple(rows[0]) == RUN_COLUMNS
        assert rows[0]["config_hash"] == "abc"
        assert rows[-1]["status"] == "failed"

    def test_summary_rows(self, tmp_path):
        summaries = summarize(self.results())
        path = emit_results(summaries, tmp_path / "summary.csv", kind="summary")
        with path.open(newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 1
        assert tuple(rows[0]) == SUMMARY_COLUMNS
        assert rows[0]["method"] == "ft"

    def test_curves(self, tmp_path):
        path = emit_results(self.results(), tmp_path / "curves.json", "json", kind="curves")
        curves = json.loads(path.read_text())
        assert [c["visit_index"] for c in curves] == [1, 2]
        assert curves[-1]["n_runs"] == 3

    def test_unknown_kind_and_format(self, tmp_path):
        with pytest.raises(ConfigurationError):
            emit_results([], tmp_path / "x.csv", kind="tables")
        with pytest.raises(ConfigurationError):
            emit_results([], tmp_path / "x.xml", format="xml")

    def test_unreadable(self, tmp_path):
        with pytest.raises(DataError):
            load_runs(tmp_path / "missing.csv")
