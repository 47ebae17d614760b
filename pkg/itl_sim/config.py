"""Experiment configuration: JSON documents mapped onto nested dataclasses.

Validation collects every violation (unknown keys included) and raises a single
``ConfigError`` listing them all.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .data_centers import EXTERNAL_FORMATS
from .errors import ConfigError
from .federation import CWT, SWT, TrainingPolicy, TransferSchedule
from .optimizers import OPTIMIZER_KINDS
from .regularizers import METHODS, RegularizerSettings
from .tensor_nn import CrossEntropy, Dice, LossKind, ModelSpec, MultiHead, SingleHead, mlp_spec

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "ITL_SIM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "results"
HASH_EXCLUDED = ("output_dir", "jobs")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


@dataclass
class TaskConfig:
    """Where the center data comes from."""

    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 32
    num_centers: int = 5
    per_center_counts: List[int] = field(default_factory=lambda: [80, 20, 10])
    cluster_std: float = 0.12
    mean_spread: float = 0.05
    data_seed: int = 0
    manifest: Optional[str] = None
    format: str = "csv-labels"


@dataclass
class ModelConfig:
    hidden: List[int] = field(default_factory=lambda: [64, 32])
    head_hidden: List[int] = field(default_factory=list)
    head: str = "single"
    loss: str = "cross-entropy"
    dice_smoothing: float = 1.0


@dataclass
class ScheduleConfig:
    kind: str = "cwt"
    epochs_per_center: int = 50
    transfer_every: int = 10
    iterations: int = 5
    first_visit_epochs: Optional[int] = None


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: Optional[float] = None
    reload: str = "rop"
    lrgs: bool = False
    batch_size: int = 100
    balanced: bool = True
    sgd_decay_base: float = 0.8
    sgd_decay_period: float = 5.0


@dataclass
class MonitorConfig:
    e_val: int = 5
    e_stop: int = 20
    min_delta: float = 1e-6


@dataclass
class RegularizerConfig:
    """Regularization strengths and method knobs.

    ``lambdas`` overrides ``default_lambda`` per method name.
    """

    default_lambda: float = 1.0
    lambdas: Dict[str, float] = field(default_factory=dict)
    imm_l2: float = 0.01
    temperature: float = 2.0
    ebll_alpha: float = 1e-3
    ebll_code_dim: Optional[int] = None
    ebll_epochs: int = 50
    ebll_lr: float = 1e-3
    ebll_decoder: str = "relu"
    si_epsilon: float = 1e-3
    si_path_sign: float = 1.0
    mas_sensitivity: str = "l2"
    imm_merge: str = "every-visit"

    def settings_for(self, method: str) -> RegularizerSettings:
        return RegularizerSettings(
            method=method,
            lam=float(self.lambdas.get(method, self.default_lambda)),
            imm_l2=self.imm_l2,
            temperature=self.temperature,
            ebll_alpha=self.ebll_alpha,
            ebll_code_dim=self.ebll_code_dim,
            ebll_epochs=self.ebll_epochs,
            ebll_lr=self.ebll_lr,
            ebll_decoder=self.ebll_decoder,
            si_epsilon=self.si_epsilon,
            si_path_sign=self.si_path_sign,
            mas_sensitivity=self.mas_sensitivity,
            imm_merge=self.imm_merge,
        )


@dataclass
class ScenarioConfig:
    """One data scenario: which centers are noisy, training order, trained subset."""

    name: str = "iid"
    noisy_centers: List[int] = field(default_factory=list)
    sigma: float = 25.0
    clip: bool = False
    order: Optional[List[int]] = None
    train_centers: Optional[List[int]] = None


@dataclass
class BaselineConfig:
    joint: bool = False
    independent: bool = False
    joint_budget: str = "matched"


_SECTIONS = {
    "task": TaskConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "optimizer": OptimizerConfig,
    "monitor": MonitorConfig,
    "regularizer": RegularizerConfig,
    "baselines": BaselineConfig,
}


@dataclass
class ExperimentConfig:
    """A full experiment: methods x scenarios x seeds, plus optional baselines."""

    name: str = "experiment"
    methods: List[str] = field(default_factory=lambda: ["ft"])
    scenarios: List[ScenarioConfig] = field(default_factory=lambda: [ScenarioConfig()])
    repeats: int = 10
    seed_base: int = 0
    significance_test: str = "welch"
    reference_method: str = "ft"
    init_checkpoint: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    output_dir: Optional[str] = None
    jobs: int = 1
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Build a config, collecting unknown keys and malformed sections as violations."""
        violations: List[str] = []
        config = _from_dict(cls, data, "", violations)
        if violations:
            raise ConfigError(violations)
        return config

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return parse_config(path)

    @property
    def seeds(self) -> List[int]:
        return [self.seed_base + r for r in range(self.repeats)]

    def scenario(self, name: str) -> ScenarioConfig:
        for s in self.scenarios:
            if s.name == name:
                return s
        raise KeyError(name)


def _from_dict(cls, data, path: str, violations: List[str]):
    if not isinstance(data, dict):
        violations.append(f"{path or 'config'}: expected an object, got {type(data).__name__}")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in sorted(set(data) - known):
        violations.append(f"{path}{key}: unknown key")
    kwargs = {}
    for key in known & set(data):
        value = data[key]
        if cls is ExperimentConfig and key in _SECTIONS:
            kwargs[key] = _from_dict(_SECTIONS[key], value, f"{key}.", violations)
        elif cls is ExperimentConfig and key == "scenarios":
            if not isinstance(value, list):
                violations.append("scenarios: expected a list")
                continue
            kwargs[key] = [_from_dict(ScenarioConfig, s, f"scenarios[{i}].", violations) for i, s in enumerate(value)]
        else:
            kwargs[key] = value
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _int_at_least(violations, name, value, low):
    if not _is_int(value) or value < low:
        violations.append(f"{name}: must be an integer >= {low}, got {value!r}")


def _number_at_least(violations, name, value, low, strict=False):
    if not _is_number(value) or value < low or (strict and value == low):
        relation = ">" if strict else ">="
        violations.append(f"{name}: must be a number {relation} {low}, got {value!r}")


def _one_of(violations, name, value, choices):
    if value not in choices:
        violations.append(f"{name}: {value!r} is not one of {', '.join(map(str, choices))}")


def _center_list(violations, name, value, n, allow_none=True):
    if value is None and allow_none:
        return
    if not isinstance(value, list) or not all(_is_int(c) for c in value):
        violations.append(f"{name}: must be a list of center numbers")
        return
    bad = [c for c in value if not 1 <= c <= n]
    if bad:
        violations.append(f"{name}: centers {bad} outside 1..{n}")


def validate(config: ExperimentConfig) -> List[str]:
    """Every rule the config violates; empty when valid."""
    v: List[str] = []
    t, m, s, o = config.task, config.model, config.schedule, config.optimizer
    _one_of(v, "task.kind", t.kind, ("synthetic", "external"))
    if t.kind == "synthetic":
        _int_at_least(v, "task.num_classes", t.num_classes, 2)
        _int_at_least(v, "task.dim", t.dim, 1)
        _int_at_least(v, "task.num_centers", t.num_centers, 1)
        counts = t.per_center_counts
        if _is_int(counts):
            _int_at_least(v, "task.per_center_counts", counts, 3)
        elif not (isinstance(counts, list) and len(counts) == 3 and all(_is_int(c) and c >= 1 for c in counts)):
            v.append("task.per_center_counts: must be an integer or a [train, val, test] list of positive integers")
        _number_at_least(v, "task.cluster_std", t.cluster_std, 0.0, strict=True)
        _number_at_least(v, "task.mean_spread", t.mean_spread, 0.0)
    else:
        if not t.manifest:
            v.append("task.manifest: required for external tasks")
        _one_of(v, "task.format", t.format, EXTERNAL_FORMATS)
    num_centers = t.num_centers if _is_int(t.num_centers) and t.num_centers >= 1 else 1

    if not isinstance(m.hidden, list) or not all(_is_int(h) and h >= 1 for h in m.hidden):
        v.append("model.hidden: must be a list of positive layer widths")
    if not isinstance(m.head_hidden, list) or not all(_is_int(h) and h >= 1 for h in m.head_hidden):
        v.append("model.head_hidden: must be a list of positive layer widths")
    _one_of(v, "model.head", m.head, ("single", "multi"))
    _one_of(v, "model.loss", m.loss, ("cross-entropy", "dice"))
    _number_at_least(v, "model.dice_smoothing", m.dice_smoothing, 0.0, strict=True)

    _one_of(v, "schedule.kind", s.kind, ("swt", "cwt"))
    _int_at_least(v, "schedule.epochs_per_center", s.epochs_per_center, 1)
    _int_at_least(v, "schedule.transfer_every", s.transfer_every, 1)
    _int_at_least(v, "schedule.iterations", s.iterations, 1)
    if s.first_visit_epochs is not None:
        _int_at_least(v, "schedule.first_visit_epochs", s.first_visit_epochs, 1)

    _one_of(v, "optimizer.kind", o.kind, OPTIMIZER_KINDS)
    if o.lr is not None:
        _number_at_least(v, "optimizer.lr", o.lr, 0.0, strict=True)
    _one_of(v, "optimizer.reload", o.reload, ("rop", "nop"))
    _int_at_least(v, "optimizer.batch_size", o.batch_size, 1)
    _number_at_least(v, "optimizer.sgd_decay_base", o.sgd_decay_base, 0.0, strict=True)
    _number_at_least(v, "optimizer.sgd_decay_period", o.sgd_decay_period, 0.0, strict=True)

    _int_at_least(v, "monitor.e_val", config.monitor.e_val, 1)
    _int_at_least(v, "monitor.e_stop", config.monitor.e_stop, 1)
    _number_at_least(v, "monitor.min_delta", config.monitor.min_delta, 0.0)

    r = config.regularizer
    _number_at_least(v, "regularizer.default_lambda", r.default_lambda, 0.0)
    if not isinstance(r.lambdas, dict):
        v.append("regularizer.lambdas: must map method names to strengths")
    else:
        for method, lam in sorted(r.lambdas.items()):
            _one_of(v, f"regularizer.lambdas.{method}", method, METHODS)
            _number_at_least(v, f"regularizer.lambdas.{method}", lam, 0.0)
    _number_at_least(v, "regularizer.imm_l2", r.imm_l2, 0.0)
    _number_at_least(v, "regularizer.temperature", r.temperature, 0.0, strict=True)
    _number_at_least(v, "regularizer.ebll_alpha", r.ebll_alpha, 0.0)
    if r.ebll_code_dim is not None:
        _int_at_least(v, "regularizer.ebll_code_dim", r.ebll_code_dim, 1)
    _int_at_least(v, "regularizer.ebll_epochs", r.ebll_epochs, 0)
    _number_at_least(v, "regularizer.ebll_lr", r.ebll_lr, 0.0, strict=True)
    _one_of(v, "regularizer.ebll_decoder", r.ebll_decoder, ("relu", "linear"))
    _number_at_least(v, "regularizer.si_epsilon", r.si_epsilon, 0.0, strict=True)
    _one_of(v, "regularizer.si_path_sign", r.si_path_sign, (1.0, -1.0))
    _one_of(v, "regularizer.mas_sensitivity", r.mas_sensitivity, ("l2", "per-logit"))
    _one_of(v, "regularizer.imm_merge", r.imm_merge, ("every-visit", "end"))

    if not isinstance(config.methods, list) or not config.methods:
        v.append("methods: must be a non-empty list")
    else:
        for method in config.methods:
            if method not in METHODS:
                v.append(f"methods: unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        if len(set(config.methods)) != len(config.methods):
            v.append("methods: duplicate entries")
    if not config.scenarios:
        v.append("scenarios: at least one scenario is required")
    names = [sc.name for sc in config.scenarios]
    if len(set(names)) != len(names):
        v.append("scenarios: names must be unique")
    for i, sc in enumerate(config.scenarios):
        prefix = f"scenarios[{i}]"
        _center_list(v, f"{prefix}.noisy_centers", sc.noisy_centers, num_centers, allow_none=False)
        _number_at_least(v, f"{prefix}.sigma", sc.sigma, 0.0)
        _center_list(v, f"{prefix}.order", sc.order, num_centers)
        if isinstance(sc.order, list) and sorted(sc.order) != list(range(1, num_centers + 1)):
            v.append(f"{prefix}.order: must be a permutation of 1..{num_centers}")
        _center_list(v, f"{prefix}.train_centers", sc.train_centers, num_centers)
        if sc.train_centers is not None and m.head == "multi":
            v.append(f"{prefix}.train_centers: not supported with multi-head models")

    _int_at_least(v, "repeats", config.repeats, 1)
    _int_at_least(v, "seed_base", config.seed_base, 0)
    _int_at_least(v, "jobs", config.jobs, 1)
    _one_of(v, "significance_test", config.significance_test, ("welch", "paired"))
    _one_of(v, "baselines.joint_budget", config.baselines.joint_budget, ("per-center", "matched"))
    if m.loss == "dice" and o.balanced:
        v.append("optimizer.balanced: class-balanced sampling needs the cross-entropy loss")
    return v


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment config.

    Raises
    ------
    ConfigError
        With every violation found: unreadable file, unknown keys, range and
        membership rules.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror or exc}"]) from exc
    except ValueError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    violations: List[str] = []
    config = _from_dict(ExperimentConfig, data, "", violations)
    violations += validate(config)
    if violations:
        raise ConfigError(violations)
    logger.debug("config %s validated (hash %s)", path, config_hash(config))
    return config


def config_hash(config: ExperimentConfig) -> str:
    """First 16 hex digits of SHA-256 over the canonical JSON of the config."""
    data = {k: v for k, v in config.to_dict().items() if k not in HASH_EXCLUDED}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_loss(config: ExperimentConfig) -> LossKind:
    if config.model.loss == "dice":
        return Dice(config.model.dice_smoothing)
    return CrossEntropy()


def build_model(
    config: ExperimentConfig, input_dim: int, num_classes: int, num_centers: int, head: Optional[str] = None
) -> ModelSpec:
    """Dense model of the configured widths; ``head`` overrides the configured head setting."""
    kind = head or config.model.head
    setting = MultiHead(num_centers) if kind == "multi" else SingleHead()
    return mlp_spec(input_dim, config.model.hidden, num_classes, setting, config.model.head_hidden)


def build_schedule(config: ExperimentConfig) -> TransferSchedule:
    s = config.schedule
    if s.kind == "swt":
        return SWT(s.epochs_per_center, s.first_visit_epochs)
    return CWT(s.transfer_every, s.iterations, s.first_visit_epochs)


def build_policy(config: ExperimentConfig) -> TrainingPolicy:
    o, mon = config.optimizer, config.monitor
    return TrainingPolicy(
        loss=build_loss(config),
        batch_size=o.batch_size,
        optimizer=o.kind,
        lr=o.lr,
        reload=o.reload,
        balanced=o.balanced,
        e_val=mon.e_val,
        e_stop=mon.e_stop,
        min_delta=mon.min_delta,
        lrgs=o.lrgs,
        sgd_decay_base=o.sgd_decay_base,
        sgd_decay_period=o.sgd_decay_period,
    )
