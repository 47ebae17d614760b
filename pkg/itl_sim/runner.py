"""Experiment grids: methods x scenarios x seeds, baselines and result files."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import load_checkpoint
from .config import (
    ExperimentConfig,
    ScenarioConfig,
    build_model,
    build_policy,
    build_schedule,
    config_hash,
    default_output_dir,
)
from .data_centers import (
    CenterDataset,
    apply_noise,
    as_mask_task,
    load_external,
    make_synthetic_task,
    pool_centers,
    reorder_centers,
)
from .errors import ConfigurationError
from .federation import (
    RunSpec,
    TrainingContext,
    evaluate,
    run_schedule,
    train_visit,
    visit_plan,
)
from .metrics_report import AccuracyMatrix, RunResult, Summary, emit_results, summarize
from .regularizers import RegularizerSettings, new_regularizer_state
from .tensor_nn import ParameterSet, init_params

logger = logging.getLogger(__name__)

BASELINES = ("joint", "it")
EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3


class GridTask(NamedTuple):
    scenario: str
    method: str
    seed: int
    baseline: bool = False


@dataclass
class ExperimentOutcome:
    status: int
    results: List[RunResult] = field(default_factory=list)
    summaries: List[Summary] = field(default_factory=list)
    files: Dict[str, Path] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def build_centers(config: ExperimentConfig, scenario: ScenarioConfig) -> List[CenterDataset]:
    """Center datasets of one scenario: noise on the listed centers, then reordering."""
    task = config.task
    if task.kind == "synthetic":
        counts = task.per_center_counts if isinstance(task.per_center_counts, int) else tuple(task.per_center_counts)
        centers = make_synthetic_task(
            task.num_classes, task.dim, counts, task.num_centers, task.data_seed, task.cluster_std, task.mean_spread
        )
    else:
        centers = load_external(task.manifest, task.format)
    for c in scenario.noisy_centers:
        if not 1 <= c <= len(centers):
            raise ConfigurationError(f"scenario {scenario.name!r}: noisy center {c} does not exist")
        centers[c - 1] = apply_noise(centers[c - 1], scenario.sigma, seed=task.data_seed, clip=scenario.clip)
    if scenario.order is not None:
        centers = reorder_centers(centers, scenario.order)
    if config.model.loss == "dice":
        centers = [as_mask_task(ds) for ds in centers]
    if len(centers[0].input_shape) != 1:
        raise ConfigurationError("dense models need flat feature vectors")
    return centers


def load_init_params(config: ExperimentConfig) -> Optional[ParameterSet]:
    if not config.init_checkpoint:
        return None
    return load_checkpoint(config.init_checkpoint).params


def build_run_spec(
    config: ExperimentConfig,
    method: str,
    scenario: ScenarioConfig,
    seed: int,
    centers: Sequence[CenterDataset],
    init: Optional[ParameterSet] = None,
    digest: str = "",
) -> RunSpec:
    model = build_model(config, centers[0].input_shape[0], centers[0].num_classes, len(centers))
    return RunSpec(
        model=model,
        schedule=build_schedule(config),
        policy=build_policy(config),
        regularizer=config.regularizer.settings_for(method),
        seed=seed,
        scenario=scenario.name,
        train_centers=tuple(scenario.train_centers) if scenario.train_centers else None,
        config_hash=digest,
        checkpoint_dir=config.checkpoint_dir,
        init_params=init,
    )


def _baseline_epochs(config: ExperimentConfig, centers: Sequence[CenterDataset]) -> int:
    if config.baselines.joint_budget == "per-center":
        return config.schedule.epochs_per_center
    return sum(epochs for _, epochs in visit_plan(build_schedule(config), range(1, len(centers) + 1)))


def _fresh_context(config, model, seed, init: Optional[ParameterSet]) -> TrainingContext:
    params = dict(init) if init is not None else init_params(model, seed)
    policy = build_policy(config)
    reg = new_regularizer_state(RegularizerSettings(method="ft"))
    return TrainingContext(params, policy.fresh_optimizer(params), reg, 1, None, True)


def run_baseline(
    kind: str,
    config: ExperimentConfig,
    scenario: Optional[ScenarioConfig] = None,
    seed: Optional[int] = None,
    centers: Optional[Sequence[CenterDataset]] = None,
) -> RunResult:
    """Joint training on pooled data, or independent training (IT) of one model per center.

    Both use a single-head model. IT reports the mean accuracy of each model on
    its own center (``extra['local']``) and on every center (``extra['global']``).
    """
    if kind not in BASELINES:
        raise ConfigurationError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    scenario = scenario or config.scenarios[0]
    seed = config.seed_base if seed is None else seed
    centers = list(centers) if centers is not None else build_centers(config, scenario)
    digest = config_hash(config)
    model = build_model(config, centers[0].input_shape[0], centers[0].num_classes, len(centers), head="single")
    policy = build_policy(config)
    epochs = _baseline_epochs(config, centers)
    init = load_init_params(config) if config.model.head == "single" else None
    if scenario.train_centers:
        trained = [centers[c - 1] for c in scenario.train_centers]
    else:
        trained = list(centers)
    if kind == "joint":
        rng = np.random.default_rng([seed, 1])
        outcome = train_visit(model, _fresh_context(config, model, seed, init), pool_centers(trained), epochs,
                              policy, rng, seed, finalize=False)
        column = evaluate(model, outcome.params, centers, policy.loss)
        matrix = AccuracyMatrix(column[:, None])
        extra = {"accuracy": float(column.mean()), "epochs": epochs}
        logger.info("joint baseline %s seed %d: %.2f", scenario.name, seed, extra["accuracy"])
        return RunResult("joint", scenario.name, seed, matrix, config_hash=digest, extra=extra,
                         final_params=outcome.params)
    columns, visits = [], []
    for ds in trained:
        rng = np.random.default_rng([seed, ds.center])
        outcome = train_visit(model, _fresh_context(config, model, seed, init), ds, epochs, policy, rng, seed,
                              finalize=False)
        columns.append(evaluate(model, outcome.params, centers, policy.loss))
        visits.append(ds.center)
    values = np.stack(columns, axis=1)
    local = float(np.mean([values[c - 1, i] for i, c in enumerate(visits)]))
    overall = float(values.mean())
    extra = {"accuracy": overall, "local": local, "global": overall, "n_models": len(visits), "epochs": epochs}
    logger.info("IT baseline %s seed %d: local %.2f, all centers %.2f", scenario.name, seed, local, overall)
    return RunResult("it", scenario.name, seed, AccuracyMatrix(values, tuple(visits)), config_hash=digest,
                     extra=extra)


def run_single(config: ExperimentConfig, task: GridTask, centers=None, init=None) -> RunResult:
    """Run one grid cell; any failure becomes a failed result carrying its provenance."""
    digest = config_hash(config)
    try:
        scenario = config.scenario(task.scenario)
        centers = centers if centers is not None else build_centers(config, scenario)
        if task.baseline:
            return run_baseline(task.method, config, scenario, task.seed, centers)
        if init is None:
            init = load_init_params(config)
        run_spec = build_run_spec(config, task.method, scenario, task.seed, centers, init, digest)
        return run_schedule(run_spec, centers)
    except Exception as exc:  # noqa: BLE001 - recorded as a failure row, the grid continues
        logger.warning("%s/%s seed %d failed: %s", task.scenario, task.method, task.seed, exc)
        return RunResult(task.method, task.scenario, task.seed, failed=True,
                         error=f"{type(exc).__name__}: {exc}", config_hash=digest)


def _run_from_dict(config_data: dict, task: GridTask) -> RunResult:
    return run_single(ExperimentConfig.from_dict(config_data), task)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


def grid_tasks(
    config: ExperimentConfig,
    seeds: Optional[Sequence[int]] = None,
    baselines: Optional[Sequence[str]] = None,
    methods: Optional[Sequence[str]] = None,
) -> List[GridTask]:
    """Every (scenario, method, seed) cell, baselines after methods, in a fixed order.

    ``methods`` and ``baselines`` default to the ones the config enables.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    methods = list(config.methods if methods is None else methods)
    if baselines is None:
        baselines = [b for b, on in (("joint", config.baselines.joint), ("it", config.baselines.independent)) if on]
    tasks = []
    for scenario in config.scenarios:
        for method in methods:
            tasks += [GridTask(scenario.name, method, s) for s in seeds]
        for kind in baselines:
            tasks += [GridTask(scenario.name, kind, s, baseline=True) for s in seeds]
    return tasks


def run_grid(
    config: ExperimentConfig,
    seeds: Optional[Sequence[int]] = None,
    jobs: Optional[int] = None,
    baselines: Optional[Sequence[str]] = None,
    progress: bool = True,
    methods: Optional[Sequence[str]] = None,
) -> List[RunResult]:
    """Run the grid, in a process pool when ``jobs > 1``; results come back in grid order."""
    tasks = grid_tasks(config, seeds, baselines, methods)
    order = {task: i for i, task in enumerate(tasks)}
    jobs = config.jobs if jobs is None else jobs
    results: Dict[GridTask, RunResult] = {}
    bar = tqdm(total=len(tasks), desc=config.name, unit="run", disable=not progress)
    if jobs <= 1:
        centers = {s.name: None for s in config.scenarios}
        init = load_init_params(config)
        for task in tasks:
            if centers[task.scenario] is None:
                try:
                    centers[task.scenario] = build_centers(config, config.scenario(task.scenario))
                except Exception as exc:  # noqa: BLE001 - every cell of the scenario fails below
                    logger.warning("scenario %s: cannot build centers: %s", task.scenario, exc)
            results[task] = run_single(config, task, centers[task.scenario], init)
            bar.update()
    else:
        data = config.to_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_run_from_dict, data, task): task for task in tasks}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                bar.update()
    bar.close()
    return [results[task] for task in sorted(results, key=order.get)]


def run_experiment(
    config: ExperimentConfig,
    out_dir: Union[str, Path, None] = None,
    format: str = "csv",
    jobs: Optional[int] = None,
    seeds: Optional[Sequence[int]] = None,
    progress: bool = True,
    methods: Optional[Sequence[str]] = None,
    baselines: Optional[Sequence[str]] = None,
    prefix: str = "",
) -> ExperimentOutcome:
    """Run the full grid with baselines and write runs, summary and curve files.

    Status is 0 when every run succeeded, 3 otherwise. ``prefix`` is prepended
    to the result file names.
    """
    out = Path(out_dir or config.output_dir or default_output_dir())
    digest = config_hash(config)
    logger.info("experiment %s (config %s) -> %s", config.name, digest, out)
    results = run_grid(config, seeds, jobs, baselines, progress, methods)
    summaries = summarize(results, config.reference_method, config.significance_test)
    files = write_outputs(results, summaries, out, format, prefix)
    files["config"] = config.save(out / f"{prefix}config.json")
    failed = [r for r in results if r.failed]
    if failed:
        logger.warning("%d of %d runs failed", len(failed), len(results))
    return ExperimentOutcome(EXIT_FAILED if failed else EXIT_OK, results, summaries, files)


def write_outputs(
    results: Sequence[RunResult], summaries: Sequence[Summary], out: Path, format: str = "csv", prefix: str = ""
) -> Dict[str, Path]:
    return {
        "runs": emit_results(results, out / f"{prefix}runs.{format}", format, "runs"),
        "summary": emit_results(summaries, out / f"{prefix}summary.{format}", format, "summary"),
        "curves": emit_results(results, out / f"{prefix}curves.{format}", format, "curves"),
    }


def parse_seeds(text: str) -> Tuple[Optional[int], Optional[List[int]]]:
    """``"10"`` means ten repeats; ``"0,3,7"`` and ``"0-9"`` are explicit seed lists."""
    text = text.strip()
    if "," in text or "-" in text:
        seeds: List[int] = []
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                seeds += list(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        return None, seeds
    count = int(text)
    if count < 1:
        raise ValueError("seed count must be positive")
    return count, None
