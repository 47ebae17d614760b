"""Peer-to-peer weight transfer between virtual centers.

A run walks a visit plan (single pass for SWT, ``iterations`` ring passes for
CWT). Each visit decodes the previous center's checkpoint, trains locally under
the overfitting monitor, keeps the minimum-validation-loss state, evaluates the
shared model and encodes a new checkpoint for the next center.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import EXTENSION, Checkpoint, decode_checkpoint, encode_checkpoint
from .data_centers import Batch, CenterDataset, Split, balanced_batches, shuffled_batches
from .errors import ConfigurationError, DataError, NumericalError
from .metrics_report import AccuracyMatrix, RunResult
from .optimizers import (
    OptimizerState,
    advance_epoch,
    halve_learning_rate,
    inject_regularized_gradient,
    new_optimizer,
    step,
)
from .regularizers import (
    RegularizerSettings,
    RegularizerState,
    begin_visit,
    end_visit,
    evaluation_params,
    loss_terms,
    new_regularizer_state,
    penalty_gradient,
    track_step,
)
from .tensor_nn import (
    CrossEntropy,
    LossKind,
    ModelSpec,
    ParameterSet,
    backward,
    check_model_params,
    copy_params,
    forward,
    forward_pass,
    head_param_names,
    init_params,
    score,
    task_loss,
)

logger = logging.getLogger(__name__)

RELOAD_POLICIES = ("rop", "nop")


# ---------------------------------------------------------------------------
# Schedules and policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SWT:
    """Single weight transfer: every center once, in order."""

    epochs_per_center: int = 50
    first_visit_epochs: Optional[int] = None


@dataclass(frozen=True)
class CWT:
    """Cyclic weight transfer: ``iterations`` passes over the ring, ``transfer_every`` epochs per visit."""

    transfer_every: int = 10
    iterations: int = 5
    first_visit_epochs: Optional[int] = None


TransferSchedule = Union[SWT, CWT]


def visit_plan(schedule: TransferSchedule, sequence: Sequence[int]) -> List[Tuple[int, int]]:
    """``(center, epochs)`` for every visit of the schedule over the training ``sequence``."""
    if isinstance(schedule, SWT):
        rounds, epochs = 1, schedule.epochs_per_center
    elif isinstance(schedule, CWT):
        rounds, epochs = schedule.iterations, schedule.transfer_every
    else:
        raise ConfigurationError(f"unknown transfer schedule {schedule!r}")
    if rounds < 1 or epochs < 1:
        raise ConfigurationError("schedules need at least one iteration and one epoch per visit")
    plan = [(center, epochs) for _ in range(rounds) for center in sequence]
    first = schedule.first_visit_epochs
    if first is not None and plan:
        if first < 1:
            raise ConfigurationError("first_visit_epochs must be positive")
        plan[0] = (plan[0][0], first)
    return plan


@dataclass(frozen=True)
class TrainingPolicy:
    loss: LossKind = CrossEntropy()
    batch_size: int = 100
    optimizer: str = "adam"
    lr: Optional[float] = None
    reload: str = "rop"
    balanced: bool = True
    e_val: int = 5
    e_stop: int = 20
    min_delta: float = 1e-6
    lrgs: bool = False
    lrgs_candidates: Tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001)
    lrgs_epochs: int = 2
    sgd_decay_base: float = 0.8
    sgd_decay_period: float = 5.0

    def __post_init__(self):
        if self.reload not in RELOAD_POLICIES:
            raise ConfigurationError(f"unknown optimizer reload policy {self.reload!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")

    def fresh_optimizer(self, params: ParameterSet, lr: Optional[float] = None) -> OptimizerState:
        return new_optimizer(
            self.optimizer,
            params,
            lr=self.lr if lr is None else lr,
            decay_base=self.sgd_decay_base,
            decay_period=self.sgd_decay_period,
        )


@dataclass(frozen=True)
class RunSpec:
    """Everything that determines one run apart from the center data."""

    model: ModelSpec
    schedule: TransferSchedule = SWT()
    policy: TrainingPolicy = TrainingPolicy()
    regularizer: RegularizerSettings = RegularizerSettings()
    seed: int = 0
    scenario: str = "default"
    train_centers: Optional[Tuple[int, ...]] = None
    config_hash: str = ""
    checkpoint_dir: Optional[str] = None
    init_params: Optional[ParameterSet] = field(default=None, compare=False, hash=False)

    @property
    def method(self) -> str:
        return self.regularizer.method


# ---------------------------------------------------------------------------
# Overfitting monitor
# ---------------------------------------------------------------------------


class MonitorAction(str, Enum):
    CONTINUE = "continue"
    HALVE_LR = "halve-lr"
    EARLY_STOP = "early-stop"


@dataclass(frozen=True)
class VisitSnapshot:
    params: ParameterSet
    optimizer: OptimizerState
    regularizer: RegularizerState
    epoch: int = 0


@dataclass(frozen=True)
class OverfitMonitor:
    """Learning-rate halving and early stopping on the local validation loss.

    The halving and early-stop counters run independently; both reset on an
    improvement, halving also resets its own counter.
    """

    e_val: int = 5
    e_stop: int = 20
    min_delta: float = 1e-6
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    epoch: int = 0
    since_improvement: int = 0
    since_halving: int = 0
    best: Optional[VisitSnapshot] = None

    def start(self, val_loss: float, snapshot: Optional[VisitSnapshot] = None) -> "OverfitMonitor":
        """Seed the monitor with the validation loss of the incoming model (epoch 0)."""
        return replace(self, best_val_loss=float(val_loss), best_epoch=0, epoch=0,
                       since_improvement=0, since_halving=0, best=snapshot)


class MonitorStep(NamedTuple):
    monitor: OverfitMonitor
    optimizer: OptimizerState
    action: MonitorAction


def monitor_epoch(
    monitor: OverfitMonitor,
    val_loss: float,
    optimizer: OptimizerState,
    snapshot: Optional[VisitSnapshot] = None,
) -> MonitorStep:
    """Record one epoch's validation loss.

    An improvement is a decrease by more than ``min_delta`` below the best
    loss so far; it stores ``snapshot`` as the new best state.
    """
    if not np.isfinite(val_loss):
        raise NumericalError("non-finite validation loss")
    epoch = monitor.epoch + 1
    if val_loss < monitor.best_val_loss - monitor.min_delta:
        improved = replace(
            monitor,
            epoch=epoch,
            best_val_loss=float(val_loss),
            best_epoch=epoch,
            since_improvement=0,
            since_halving=0,
            best=snapshot if snapshot is not None else monitor.best,
        )
        return MonitorStep(improved, optimizer, MonitorAction.CONTINUE)
    since_improvement = monitor.since_improvement + 1
    since_halving = monitor.since_halving + 1
    action = MonitorAction.CONTINUE
    if since_improvement >= monitor.e_stop:
        action = MonitorAction.EARLY_STOP
    elif since_halving >= monitor.e_val:
        action = MonitorAction.HALVE_LR
        optimizer = halve_learning_rate(optimizer)
        since_halving = 0
    updated = replace(monitor, epoch=epoch, since_improvement=since_improvement, since_halving=since_halving)
    return MonitorStep(updated, optimizer, action)


# ---------------------------------------------------------------------------
# Hand-off
# ---------------------------------------------------------------------------


class TrainingContext(NamedTuple):
    params: ParameterSet
    optimizer: OptimizerState
    regularizer: RegularizerState
    center: int
    head_index: Optional[int]
    first_visit: bool


def handoff(
    checkpoint: Union[Checkpoint, bytes],
    next_center: int,
    model: ModelSpec,
    policy: TrainingPolicy,
) -> TrainingContext:
    """Receive a checkpoint at ``next_center``.

    ROp carries the optimizer state over verbatim; NOp starts a fresh optimizer
    at the configured learning rate. Parameters pass through unchanged. In a
    multi-head model the center's own classifier becomes active; a center that
    was never visited still has its untouched initial classifier.
    """
    if isinstance(checkpoint, (bytes, bytearray)):
        checkpoint = decode_checkpoint(bytes(checkpoint))
    check_model_params(model, checkpoint.params)
    if policy.reload == "rop":
        optimizer = checkpoint.optimizer
    else:
        optimizer = policy.fresh_optimizer(checkpoint.params)
    head = None
    if model.is_multi_head:
        if not 1 <= next_center <= model.head_setting.num_heads:
            raise ConfigurationError(f"center {next_center} has no classifier head")
        head = next_center - 1
    visited = checkpoint.provenance.get("visited", [])
    return TrainingContext(
        checkpoint.params, optimizer, checkpoint.regularizer, next_center, head, next_center not in visited
    )


def _inactive_heads(model: ModelSpec, head_index: Optional[int]) -> frozenset:
    if not model.is_multi_head:
        return frozenset()
    active = set(head_param_names(model, head_index))
    names = set()
    for h in range(model.head_setting.num_heads):
        names.update(n for n in head_param_names(model, h) if n not in active)
    return frozenset(names)


# ---------------------------------------------------------------------------
# Local training and evaluation
# ---------------------------------------------------------------------------


class VisitOutcome(NamedTuple):
    params: ParameterSet
    optimizer: OptimizerState
    regularizer: RegularizerState
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    halvings: int
    early_stopped: bool


def validation_loss(
    model: ModelSpec, params: ParameterSet, split: Split, loss: LossKind, head_index: Optional[int] = None
) -> float:
    value, _ = task_loss(forward(model, params, split.x, head_index), split.y, loss)
    return value


def _epoch_batches(dataset: CenterDataset, policy: TrainingPolicy, rng: np.random.Generator) -> Iterator[Batch]:
    if policy.balanced and isinstance(policy.loss, CrossEntropy):
        return balanced_batches(dataset.train, policy.batch_size, rng, dataset.num_classes)
    return shuffled_batches(dataset.train, policy.batch_size, rng)


def train_visit(
    model: ModelSpec,
    context: TrainingContext,
    dataset: CenterDataset,
    epochs: int,
    policy: TrainingPolicy,
    rng: np.random.Generator,
    seed: int = 0,
    finalize: bool = True,
) -> VisitOutcome:
    """Train at one center and return the minimum-validation-loss state.

    Each step adds the loss-level regularization gradient and the penalty
    gradient to the task gradient before the optimizer sees it; SI tracks the
    task gradient alone. With ``finalize`` the regularizer's end-of-visit
    artifacts are produced from the returned parameters.
    """
    if len(dataset.train) == 0:
        raise DataError(f"center {dataset.center} has no training data")
    loss, head = policy.loss, context.head_index
    frozen = _inactive_heads(model, head)
    params, optimizer = context.params, context.optimizer
    reg = begin_visit(context.regularizer, params)
    monitor = OverfitMonitor(policy.e_val, policy.e_stop, policy.min_delta).start(
        validation_loss(model, params, dataset.val, loss, head), VisitSnapshot(params, optimizer, reg, 0)
    )
    halvings, early_stopped, epochs_run = 0, False, 0
    for epoch in range(1, epochs + 1):
        for xb, yb in _epoch_batches(dataset, policy, rng):
            fp = forward_pass(model, params, xb, head)
            value, d_logits = task_loss(fp.logits, yb, loss)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite task loss at center {dataset.center}, epoch {epoch}")
            g_task = backward(model, params, fp, d_logits)
            grad = g_task
            _, extra = loss_terms(model, reg, params, fp, xb)
            if extra is not None:
                grad = inject_regularized_gradient(grad, extra)
            grad = inject_regularized_gradient(grad, penalty_gradient(reg.method, params, reg).grad)
            before = params
            optimizer, params = step(optimizer, params, grad, frozen)
            reg = track_step(reg, g_task, before, params)
        optimizer = advance_epoch(optimizer)
        epochs_run = epoch
        val = validation_loss(model, params, dataset.val, loss, head)
        snapshot = VisitSnapshot(params, optimizer, reg, epoch)
        monitor, optimizer, action = monitor_epoch(monitor, val, optimizer, snapshot)
        logger.debug("center %d epoch %d: val loss %.6f (%s)", dataset.center, epoch, val, action.value)
        if action is MonitorAction.HALVE_LR:
            halvings += 1
        elif action is MonitorAction.EARLY_STOP:
            early_stopped = True
            break
    best = monitor.best
    params, optimizer, reg = best.params, best.optimizer, best.regularizer
    if finalize:
        reg = end_visit(model, reg, params, dataset.train.x, dataset.train.y, dataset.center, loss, head, seed)
    return VisitOutcome(
        params, optimizer, reg, epochs_run, monitor.best_epoch, monitor.best_val_loss, halvings, early_stopped
    )


def evaluate(
    model: ModelSpec,
    params: ParameterSet,
    centers: Sequence[CenterDataset],
    loss: LossKind = CrossEntropy(),
    visited: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Test score of ``params`` on every center; NaN for multi-head centers never visited."""
    column = np.full(len(centers), np.nan)
    for ds in centers:
        if model.is_multi_head:
            if visited is None or ds.center not in visited:
                continue
            head = ds.center - 1
        else:
            head = None
        column[ds.center - 1] = score(forward(model, params, ds.test.x, head), ds.test.y, loss)
    return column


def lr_grid_search(
    model: ModelSpec,
    context: TrainingContext,
    dataset: CenterDataset,
    policy: TrainingPolicy,
    seed: int = 0,
) -> float:
    """Learning rate among ``policy.lrgs_candidates`` with the lowest validation loss after a short trial."""
    best_lr, best_loss = None, float("inf")
    for lr in policy.lrgs_candidates:
        trial = context._replace(optimizer=policy.fresh_optimizer(context.params, lr))
        rng = np.random.default_rng([seed, 1])
        try:
            outcome = train_visit(model, trial, dataset, policy.lrgs_epochs, policy, rng, seed, finalize=False)
            val = validation_loss(model, outcome.params, dataset.val, policy.loss, context.head_index)
        except NumericalError:
            logger.debug("learning rate %g diverged during grid search", lr)
            continue
        if val < best_loss:
            best_lr, best_loss = lr, val
    if best_lr is None:
        raise NumericalError("every learning-rate candidate diverged")
    logger.info("learning-rate grid search chose %g (val loss %.4f)", best_lr, best_loss)
    return best_lr


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def _check_centers(run_spec: RunSpec, centers: Sequence[CenterDataset]) -> Tuple[int, ...]:
    if not centers:
        raise DataError("no centers to train on")
    for i, ds in enumerate(centers):
        if ds.center != i + 1:
            raise DataError(f"center at position {i + 1} is numbered {ds.center}")
        if ds.input_shape != run_spec.model.input_shape:
            raise DataError(
                f"center {ds.center} instances {ds.input_shape} do not fit model input {run_spec.model.input_shape}"
            )
    if run_spec.model.is_multi_head and run_spec.model.head_setting.num_heads != len(centers):
        raise ConfigurationError(
            f"multi-head model has {run_spec.model.head_setting.num_heads} heads for {len(centers)} centers"
        )
    sequence = tuple(run_spec.train_centers) if run_spec.train_centers else tuple(range(1, len(centers) + 1))
    bad = [c for c in sequence if not 1 <= c <= len(centers)]
    if bad:
        raise ConfigurationError(f"training centers {bad} do not exist")
    return sequence


def initial_checkpoint(run_spec: RunSpec, rng: np.random.Generator) -> Checkpoint:
    """Model, optimizer and regularizer state before the first visit."""
    if run_spec.init_params is not None:
        check_model_params(run_spec.model, run_spec.init_params)
        params = copy_params(run_spec.init_params)
    else:
        params = init_params(run_spec.model, run_spec.seed)
    return Checkpoint(
        params=params,
        optimizer=run_spec.policy.fresh_optimizer(params),
        regularizer=new_regularizer_state(run_spec.regularizer),
        provenance=_provenance(run_spec, visit=0, center=0, epoch=0, visited=[], visit_centers=[]),
        rng_state=rng.bit_generator.state,
        history=[],
    )


def _provenance(run_spec: RunSpec, **fields) -> dict:
    return {"method": run_spec.method, "scenario": run_spec.scenario, "seed": run_spec.seed,
            "config_hash": run_spec.config_hash, **fields}


def _write_checkpoint(run_spec: RunSpec, visit: int, payload: bytes) -> None:
    directory = Path(run_spec.checkpoint_dir) / run_spec.scenario
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{run_spec.method}_seed{run_spec.seed}_visit{visit:03d}{EXTENSION}"
    path.write_bytes(payload)


def _run(run_spec: RunSpec, centers: Sequence[CenterDataset], resume: Optional[Checkpoint] = None) -> RunResult:
    sequence = _check_centers(run_spec, centers)
    plan = visit_plan(run_spec.schedule, sequence)
    model, policy = run_spec.model, run_spec.policy
    rng = np.random.default_rng(run_spec.seed)
    if resume is None:
        checkpoint = initial_checkpoint(run_spec, rng)
    else:
        checkpoint = resume
        rng.bit_generator.state = resume.rng_state
    start = int(checkpoint.provenance.get("visit", 0))
    if start > len(plan):
        raise ConfigurationError(f"checkpoint is at visit {start}, the plan has only {len(plan)}")
    history = [list(col) for col in checkpoint.history]
    visit_centers = list(checkpoint.provenance.get("visit_centers", []))
    visited = list(checkpoint.provenance.get("visited", []))
    payload = encode_checkpoint(checkpoint)
    final_params = checkpoint.params
    logger.info("run %s/%s seed %d: %d visits from visit %d",
                run_spec.scenario, run_spec.method, run_spec.seed, len(plan), start + 1)
    for k in range(start, len(plan)):
        center, epochs = plan[k]
        dataset = centers[center - 1]
        try:
            context = handoff(payload, center, model, policy)
            if k == 0 and policy.lrgs:
                lr = lr_grid_search(model, context, dataset, policy, run_spec.seed)
                context = context._replace(optimizer=policy.fresh_optimizer(context.params, lr))
            outcome = train_visit(model, context, dataset, epochs, policy, rng, seed=run_spec.seed + 1000 * (k + 1))
        except NumericalError as exc:
            logger.warning("run %s/%s seed %d failed at visit %d (center %d): %s",
                           run_spec.scenario, run_spec.method, run_spec.seed, k + 1, center, exc)
            return RunResult(run_spec.method, run_spec.scenario, run_spec.seed, failed=True,
                             error=f"visit {k + 1}, center {center}: {exc}", config_hash=run_spec.config_hash)
        visited = sorted(set(visited) | {center})
        visit_centers.append(center)
        shared = evaluation_params(outcome.regularizer, outcome.params, final=k == len(plan) - 1)
        column = evaluate(model, shared, centers, policy.loss, visited)
        history.append([None if np.isnan(v) else float(v) for v in column])
        logger.info(
            "visit %d/%d center %d: %d epochs, best epoch %d, val loss %.4f, %d halvings%s, mean test %.2f",
            k + 1, len(plan), center, outcome.epochs_run, outcome.best_epoch, outcome.best_val_loss,
            outcome.halvings, ", early stop" if outcome.early_stopped else "", np.nanmean(column),
        )
        checkpoint = Checkpoint(
            params=outcome.params,
            optimizer=outcome.optimizer,
            regularizer=outcome.regularizer,
            provenance=_provenance(run_spec, visit=k + 1, center=center, epoch=outcome.epochs_run,
                                   visited=visited, visit_centers=visit_centers),
            rng_state=rng.bit_generator.state,
            history=history,
        )
        payload = encode_checkpoint(checkpoint)
        if run_spec.checkpoint_dir:
            _write_checkpoint(run_spec, k + 1, payload)
        final_params = shared
    values = np.array([[np.nan if v is None else v for v in col] for col in history], dtype=np.float64)
    matrix = AccuracyMatrix(values.T.reshape(len(centers), len(history)), tuple(visit_centers))
    return RunResult(run_spec.method, run_spec.scenario, run_spec.seed, matrix, config_hash=run_spec.config_hash,
                     final_params=final_params)


def run_swt(run_spec: RunSpec, centers: Sequence[CenterDataset]) -> RunResult:
    """Train across centers ``1 -> N`` once and evaluate after every center."""
    if not isinstance(run_spec.schedule, SWT):
        raise ConfigurationError("run_swt needs an SWT schedule")
    return _run(run_spec, centers)


def run_cwt(run_spec: RunSpec, centers: Sequence[CenterDataset]) -> RunResult:
    """Train around the ring of centers ``iterations`` times, evaluating after every visit."""
    if not isinstance(run_spec.schedule, CWT):
        raise ConfigurationError("run_cwt needs a CWT schedule")
    return _run(run_spec, centers)


def run_schedule(run_spec: RunSpec, centers: Sequence[CenterDataset]) -> RunResult:
    if isinstance(run_spec.schedule, SWT):
        return run_swt(run_spec, centers)
    return run_cwt(run_spec, centers)


def resume_run(run_spec: RunSpec, centers: Sequence[CenterDataset], checkpoint: Union[Checkpoint, bytes]) -> RunResult:
    """Continue a run from a checkpoint written after one of its visits.

    The result is identical to the uninterrupted run.
    """
    if isinstance(checkpoint, (bytes, bytearray)):
        checkpoint = decode_checkpoint(bytes(checkpoint))
    if checkpoint.rng_state is None:
        raise ConfigurationError("checkpoint carries no training RNG state; cannot resume")
    return _run(run_spec, centers, resume=checkpoint)
