"""Evaluation metrics over repeated runs and result-file emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DataError
from .tensor_nn import ParameterSet

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05
SIGNIFICANCE_TESTS = ("welch", "paired")
RUN_COLUMNS = (
    "method",
    "scenario",
    "seed",
    "center",
    "visit_index",
    "visited_center",
    "accuracy",
    "status",
    "error",
    "config_hash",
    "extra",
)
SUMMARY_COLUMNS = (
    "method",
    "scenario",
    "accuracy",
    "std",
    "monotonicity",
    "significance",
    "p_value",
    "n_repeats",
    "n_failed",
    "config_hash",
)
CURVE_COLUMNS = ("method", "scenario", "visit_index", "visited_center", "accuracy", "std", "n_runs")


@dataclass(frozen=True, eq=False)
class AccuracyMatrix:
    """Accuracies ``values[c - 1, i]`` of the model after visit ``i`` on center ``c``'s test split.

    Cells that cannot be evaluated (a multi-head center whose classifier was
    never trained) are NaN. ``visits[i]`` is the center trained in visit ``i``.
    """

    values: np.ndarray
    visits: Tuple[int, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"accuracy matrix must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "visits", tuple(int(v) for v in self.visits))
        if self.visits and len(self.visits) != values.shape[1]:
            raise DataError(f"{len(self.visits)} visits recorded for {values.shape[1]} columns")

    def __eq__(self, other):
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return self.visits == other.visits and np.array_equal(self.values, other.values, equal_nan=True)

    @property
    def num_centers(self) -> int:
        return self.values.shape[0]

    @property
    def num_visits(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class RunResult:
    """Outcome of one (method, scenario, seed) run, or of a baseline."""

    method: str
    scenario: str
    seed: int
    matrix: Optional[AccuracyMatrix] = None
    failed: bool = False
    error: str = ""
    config_hash: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)
    final_params: Optional[ParameterSet] = None

    def __eq__(self, other):
        if not isinstance(other, RunResult):
            return NotImplemented
        return (
            self.method == other.method
            and self.scenario == other.scenario
            and self.seed == other.seed
            and self.matrix == other.matrix
            and self.failed == other.failed
            and self.error == other.error
            and self.config_hash == other.config_hash
            and self.extra == other.extra
        )

    @property
    def key(self) -> Tuple[str, str, int]:
        return self.method, self.scenario, self.seed


# ---------------------------------------------------------------------------
# Per-run metrics
# ---------------------------------------------------------------------------


def mean_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean over centers of the final model's accuracy."""
    if matrix.num_visits == 0:
        raise DataError("accuracy matrix has no visits")
    final = matrix.values[:, -1]
    missing = np.flatnonzero(np.isnan(final))
    if missing.size:
        raise DataError(f"final model was not evaluated on centers {(missing + 1).tolist()}")
    return float(final.mean())


def monotonicity(matrix: AccuracyMatrix) -> float:
    """Fraction of consecutive visit pairs whose accuracy did not drop (ties count as increase).

    Pairs with a missing cell on either side are skipped.
    """
    if matrix.num_visits < 2:
        raise DataError("monotonicity needs at least two visits")
    prev, curr = matrix.values[:, :-1], matrix.values[:, 1:]
    valid = ~(np.isnan(prev) | np.isnan(curr))
    if not valid.any():
        raise DataError("no pair of consecutive evaluations to compare")
    return float((curr[valid] >= prev[valid]).sum() / valid.sum())


def final_accuracy(result: RunResult) -> float:
    """Headline accuracy of a run: ``extra['accuracy']`` for baselines that set it, else the mean accuracy."""
    if "accuracy" in result.extra:
        return float(result.extra["accuracy"])
    return mean_accuracy(result.matrix)


# ---------------------------------------------------------------------------
# Significance
# ---------------------------------------------------------------------------


class Verdict(str, Enum):
    YES_PLUS = "Yes+"
    YES_MINUS = "Yes-"
    NO = "No"


@dataclass(frozen=True)
class Significance:
    verdict: Verdict
    p_value: float
    mean: float
    reference_mean: float
    test: str = "welch"


def compare_repeats(
    values: Sequence[float],
    reference: Sequence[float],
    test: str = "welch",
    alpha: float = SIGNIFICANCE_LEVEL,
) -> Significance:
    """Two-sided t-test of ``values`` against ``reference``.

    ``Yes+`` when the difference is significant and ``values`` has the higher
    mean, ``Yes-`` when significant and lower, ``No`` otherwise. ``paired``
    pairs the samples by position (shared seeds).
    """
    if test not in SIGNIFICANCE_TESTS:
        raise ConfigurationError(f"unknown significance test {test!r}; expected one of {SIGNIFICANCE_TESTS}")
    a = np.asarray(values, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DataError("significance testing needs at least two repeats on each side")
    if test == "paired" and len(a) != len(b):
        raise DataError("a paired test needs the same number of repeats on both sides")
    mean_a, mean_b = float(np.mean(np.sort(a))), float(np.mean(np.sort(b)))
    if test == "paired":
        diff = a - b
        if np.all(diff == diff[0]):
            p = 1.0 if diff[0] == 0 else 0.0
        else:
            p = float(stats.ttest_rel(a, b).pvalue)
    elif np.array_equal(np.sort(a), np.sort(b)):
        p = 1.0
    elif np.ptp(a) == 0 and np.ptp(b) == 0:
        p = 0.0
    else:
        p = float(stats.ttest_ind(a, b, equal_var=False).pvalue)
    if p < alpha and mean_a > mean_b:
        verdict = Verdict.YES_PLUS
    elif p < alpha and mean_a < mean_b:
        verdict = Verdict.YES_MINUS
    else:
        verdict = Verdict.NO
    return Significance(verdict, p, mean_a, mean_b, test)


def significance_vs_ft(
    method_values: Sequence[float], ft_values: Sequence[float], test: str = "welch"
) -> Significance:
    return compare_repeats(method_values, ft_values, test)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class RepeatSet:
    method: str
    scenario: str
    results: List[RunResult] = field(default_factory=list)

    @property
    def succeeded(self) -> List[RunResult]:
        return sorted((r for r in self.results if not r.failed), key=lambda r: r.seed)

    @property
    def seeds(self) -> List[int]:
        return [r.seed for r in self.succeeded]

    def accuracies(self) -> List[float]:
        return [final_accuracy(r) for r in self.succeeded]


@dataclass
class Summary:
    method: str
    scenario: str
    accuracy: float
    std: float
    monotonicity: float
    n_repeats: int
    n_failed: int = 0
    single_repeat: bool = False
    significance: Optional[Verdict] = None
    p_value: Optional[float] = None
    config_hash: str = ""


def aggregate(repeats: RepeatSet) -> Summary:
    """Mean accuracy, sample standard deviation and mean monotonicity over repeats.

    A single repeat has no sample deviation; it is reported as 0 with
    ``single_repeat`` set.
    """
    ok = repeats.succeeded
    if not ok:
        raise DataError(f"no successful repeats for {repeats.method} / {repeats.scenario}")
    acc = np.sort(np.asarray([final_accuracy(r) for r in ok]))
    mono = [
        monotonicity(r.matrix)
        for r in ok
        if "accuracy" not in r.extra and r.matrix is not None and r.matrix.num_visits >= 2
    ]
    return Summary(
        method=repeats.method,
        scenario=repeats.scenario,
        accuracy=float(acc.mean()),
        std=float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
        monotonicity=float(np.mean(np.sort(mono))) if mono else float("nan"),
        n_repeats=len(ok),
        n_failed=len(repeats.results) - len(ok),
        single_repeat=len(acc) == 1,
        config_hash=ok[0].config_hash,
    )


def group_repeats(results: Iterable[RunResult]) -> List[RepeatSet]:
    """Group runs by (method, scenario), keeping first-seen order."""
    groups: Dict[Tuple[str, str], RepeatSet] = {}
    for r in results:
        groups.setdefault((r.method, r.scenario), RepeatSet(r.method, r.scenario)).results.append(r)
    return list(groups.values())


def summarize(results: Iterable[RunResult], reference: str = "ft", test: str = "welch") -> List[Summary]:
    """One summary per (method, scenario); significance against ``reference`` in the same scenario."""
    sets = group_repeats(results)
    by_key = {(s.method, s.scenario): s for s in sets}
    summaries = []
    for rs in sets:
        if not rs.succeeded:
            logger.warning("%s / %s: every repeat failed", rs.method, rs.scenario)
            continue
        summary = aggregate(rs)
        ref = by_key.get((reference, rs.scenario))
        if ref is not None and rs.method != reference and len(rs.succeeded) >= 2 and len(ref.succeeded) >= 2:
            values, ref_values = rs.accuracies(), ref.accuracies()
            if test == "paired":
                shared = sorted(set(rs.seeds) & set(ref.seeds))
                values = [final_accuracy(r) for r in rs.succeeded if r.seed in shared]
                ref_values = [final_accuracy(r) for r in ref.succeeded if r.seed in shared]
            sig = compare_repeats(values, ref_values, test)
            summary.significance, summary.p_value = sig.verdict, sig.p_value
        summaries.append(summary)
    return summaries


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _cell(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    return repr(float(value))


def _extra_cell(extra: Dict[str, Any]) -> str:
    return json.dumps(extra, sort_keys=True, separators=(",", ":")) if extra else ""


def run_rows(results: Iterable[RunResult]) -> List[Dict[str, Any]]:
    rows = []
    for r in results:
        base = {"method": r.method, "scenario": r.scenario, "seed": r.seed, "config_hash": r.config_hash,
                "extra": _extra_cell(r.extra)}
        if r.failed or r.matrix is None:
            rows.append({**base, "center": "", "visit_index": "", "visited_center": "", "accuracy": "",
                         "status": "failed", "error": r.error})
            continue
        for i in range(r.matrix.num_visits):
            visited = r.matrix.visits[i] if r.matrix.visits else ""
            for c in range(r.matrix.num_centers):
                rows.append({**base, "center": c + 1, "visit_index": i + 1, "visited_center": visited,
                             "accuracy": _cell(r.matrix.values[c, i]), "status": "ok", "error": ""})
    return rows


def curve_rows(results: Iterable[RunResult]) -> List[Dict[str, Any]]:
    """Mean accuracy over centers and seeds after each visit, per (method, scenario)."""
    rows = []
    for rs in group_repeats(results):
        runs = [r for r in rs.succeeded if r.matrix is not None]
        if not runs:
            continue
        width = min(r.matrix.num_visits for r in runs)
        for i in range(width):
            per_run = np.sort([np.nanmean(r.matrix.values[:, i]) for r in runs])
            visited = runs[0].matrix.visits[i] if runs[0].matrix.visits else ""
            rows.append({
                "method": rs.method,
                "scenario": rs.scenario,
                "visit_index": i + 1,
                "visited_center": visited,
                "accuracy": _cell(float(np.mean(per_run))),
                "std": _cell(float(np.std(per_run, ddof=1)) if len(per_run) > 1 else 0.0),
                "n_runs": len(per_run),
            })
    return rows


def summary_rows(summaries: Iterable[Summary]) -> List[Dict[str, Any]]:
    return [
        {
            "method": s.method,
            "scenario": s.scenario,
            "accuracy": _cell(s.accuracy),
            "std": _cell(s.std),
            "monotonicity": _cell(s.monotonicity),
            "significance": s.significance.value if s.significance is not None else "",
            "p_value": _cell(s.p_value),
            "n_repeats": s.n_repeats,
            "n_failed": s.n_failed,
            "config_hash": s.config_hash,
        }
        for s in summaries
    ]


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator="\r\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def _matrix_to_json(matrix: Optional[AccuracyMatrix]):
    if matrix is None:
        return None
    values = [[None if np.isnan(v) else float(v) for v in row] for row in matrix.values]
    return {"values": values, "visits": list(matrix.visits)}


def _matrix_from_json(data) -> Optional[AccuracyMatrix]:
    if data is None:
        return None
    values = np.array([[np.nan if v is None else v for v in row] for row in data["values"]], dtype=np.float64)
    return AccuracyMatrix(values.reshape(len(data["values"]), -1), tuple(data["visits"]))


def run_to_dict(result: RunResult) -> Dict[str, Any]:
    return {
        "method": result.method,
        "scenario": result.scenario,
        "seed": result.seed,
        "matrix": _matrix_to_json(result.matrix),
        "failed": result.failed,
        "error": result.error,
        "config_hash": result.config_hash,
        "extra": result.extra,
    }


def run_from_dict(data: Dict[str, Any]) -> RunResult:
    return RunResult(
        method=data["method"],
        scenario=data["scenario"],
        seed=int(data["seed"]),
        matrix=_matrix_from_json(data.get("matrix")),
        failed=bool(data.get("failed", False)),
        error=data.get("error", ""),
        config_hash=data.get("config_hash", ""),
        extra=data.get("extra", {}),
    )


def summary_to_dict(summary: Summary) -> Dict[str, Any]:
    return {
        "method": summary.method,
        "scenario": summary.scenario,
        "accuracy": summary.accuracy,
        "std": summary.std,
        "monotonicity": None if np.isnan(summary.monotonicity) else summary.monotonicity,
        "n_repeats": summary.n_repeats,
        "n_failed": summary.n_failed,
        "single_repeat": summary.single_repeat,
        "significance": summary.significance.value if summary.significance is not None else None,
        "p_value": summary.p_value,
        "config_hash": summary.config_hash,
    }


def emit_results(
    items: Sequence[Union[RunResult, Summary]], path: Union[str, Path], format: str = "csv", kind: str = "runs"
) -> Path:
    """Write runs, summaries or accuracy curves as CSV or JSON.

    ``kind`` is ``runs``, ``summary`` or ``curves``.
    """
    path = Path(path)
    if format not in ("csv", "json"):
        raise ConfigurationError(f"unknown result format {format!r}")
    if kind == "runs":
        if format == "csv":
            return _write_csv(path, RUN_COLUMNS, run_rows(items))
        payload = [run_to_dict(r) for r in items]
    elif kind == "summary":
        if format == "csv":
            return _write_csv(path, SUMMARY_COLUMNS, summary_rows(items))
        payload = [summary_to_dict(s) for s in items]
    elif kind == "curves":
        rows = curve_rows(items)
        if format == "csv":
            return _write_csv(path, CURVE_COLUMNS, rows)
        payload = rows
    else:
        raise ConfigurationError(f"unknown result kind {kind!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def load_runs(path: Union[str, Path]) -> List[RunResult]:
    """Read runs written by ``emit_results`` in either format."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read results {path}: {exc}") from exc
    if path.suffix == ".json":
        return [run_from_dict(d) for d in json.loads(text)]
    return _runs_from_csv_rows(list(csv.DictReader(text.splitlines())))


def _runs_from_csv_rows(rows: List[Dict[str, str]]) -> List[RunResult]:
    grouped: Dict[Tuple[str, str, int], List[Dict[str, str]]] = {}
    for row in rows:
        grouped.setdefault((row["method"], row["scenario"], int(row["seed"])), []).append(row)
    results = []
    for (method, scenario, seed), group in grouped.items():
        head = group[0]
        extra = json.loads(head["extra"]) if head.get("extra") else {}
        if head["status"] == "failed":
            results.append(RunResult(method, scenario, seed, failed=True, error=head["error"],
                                     config_hash=head["config_hash"], extra=extra))
            continue
        n_centers = max(int(r["center"]) for r in group)
        n_visits = max(int(r["visit_index"]) for r in group)
        values = np.full((n_centers, n_visits), np.nan)
        visits = [0] * n_visits
        for r in group:
            c, i = int(r["center"]) - 1, int(r["visit_index"]) - 1
            if r["accuracy"]:
                values[c, i] = float(r["accuracy"])
            visits[i] = int(r["visited_center"]) if r["visited_center"] else 0
        matrix = AccuracyMatrix(values, tuple(visits) if all(visits) else ())
        results.append(RunResult(method, scenario, seed, matrix, config_hash=head["config_hash"], extra=extra))
    return results
