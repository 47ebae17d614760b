"""Regularization-based continual-learning strategies.

Every strategy contributes to training in two ways:

* a parameter-space penalty gradient (EWC, SI, MAS, their inverse-importance
  variants, IMM's L2 transfer), injected into the optimizer gradient;
* a loss-level term routed through the network (LWF distillation, EBLL code
  constraint), returned as an extra parameter gradient.

Artifacts (importance maps, teacher snapshot, encoder, IMM archive) are produced
at the end of a center visit and consumed during the next one. Each carries the
visit number that produced it; consuming an artifact produced at the current
visit or later is a lifecycle error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, NamedTuple, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DataError
from .optimizers import adam_step, new_optimizer
from .tensor_nn import (
    CrossEntropy,
    LossKind,
    ModelSpec,
    ParameterSet,
    backward,
    check_aligned,
    copy_params,
    extract_features,
    forward,
    forward_pass,
    log_softmax,
    loss_and_grad,
    zeros_like,
)

logger = logging.getLogger(__name__)

ImportanceMap = Dict[str, np.ndarray]

IMPORTANCE_METHODS = ("ewc", "si", "mas")
INVERSE_METHODS = ("ewc-inv", "si-inv", "mas-inv")
DISTILLATION_METHODS = ("lwf", "ebll")
IMM_METHODS = ("imm-mean", "imm-mode")
METHODS = ("ft",) + IMPORTANCE_METHODS + INVERSE_METHODS + DISTILLATION_METHODS + IMM_METHODS

MERGE_DAMPING = 1e-8


def importance_kind(method: str) -> Optional[str]:
    """``ewc``/``si``/``mas`` for importance methods and their inverse variants, else None."""
    base = method[:-4] if method.endswith("-inv") else method
    return base if base in IMPORTANCE_METHODS else None


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegularizerSettings:
    method: str = "ft"
    lam: float = 1.0
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

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.lam < 0 or self.imm_l2 < 0:
            raise ConfigurationError("regularization strengths must be non-negative")


@dataclass(frozen=True)
class SiAccumulator:
    """Running path integral ``w`` for the current visit and the parameters at visit entry."""

    w: ParameterSet
    start: ParameterSet


@dataclass(frozen=True)
class TeacherSnapshot:
    params: ParameterSet
    temperature: float = 2.0
    head_index: Optional[int] = None
    version: int = 0


@dataclass(frozen=True)
class EncoderState:
    """One-hidden-layer autoencoder over feature-extractor outputs.

    ``weights`` holds ``encoder.weight`` (D, c), ``encoder.bias`` (c,),
    ``decoder.weight`` (c, D) and ``decoder.bias`` (D,).
    """

    weights: ParameterSet
    alpha: float = 1e-3
    decoder: str = "relu"
    degenerate: bool = False
    version: int = 0

    @property
    def code_dim(self) -> int:
        return self.weights["encoder.bias"].shape[0]

    def encode(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights["encoder.weight"] + self.weights["encoder.bias"]

    def reconstruct(self, features: np.ndarray) -> np.ndarray:
        pre = self.encode(features) @ self.weights["decoder.weight"] + self.weights["decoder.bias"]
        return np.maximum(pre, 0.0) if self.decoder == "relu" else pre


@dataclass(frozen=True)
class ImmArchive:
    """Latest trained model (and Fisher map) per center, keyed by center index."""

    models: Dict[int, ParameterSet] = field(default_factory=dict)
    fishers: Dict[int, ImportanceMap] = field(default_factory=dict)
    beta: float = 0.01

    def centers(self, upto: Optional[int] = None):
        return sorted(c for c in self.models if upto is None or c <= upto)


@dataclass(frozen=True)
class RegularizerState:
    settings: RegularizerSettings
    visit: int = 0
    prev_params: Optional[ParameterSet] = None
    prev_version: int = 0
    importance: Optional[ImportanceMap] = None
    importance_version: int = 0
    si: Optional[SiAccumulator] = None
    teacher: Optional[TeacherSnapshot] = None
    encoder: Optional[EncoderState] = None
    archive: ImmArchive = field(default_factory=ImmArchive)

    @property
    def method(self) -> str:
        return self.settings.method


def new_regularizer_state(settings: RegularizerSettings) -> RegularizerState:
    return RegularizerState(settings=settings, archive=ImmArchive(beta=settings.imm_l2))


def _require_earlier(version: int, state: RegularizerState, what: str) -> None:
    if version >= state.visit:
        raise ConfigurationError(
            f"{what} produced at visit {version} cannot be used during visit {state.visit}"
        )


class Penalty(NamedTuple):
    grad: ParameterSet
    cold_start: bool = False


class Term(NamedTuple):
    """A loss-level regularization term and its gradient."""

    loss: float
    grad: np.ndarray
    cold_start: bool = False


# ---------------------------------------------------------------------------
# Penalty gradients
# ---------------------------------------------------------------------------


def importance_gradient(
    params: ParameterSet, prev: ParameterSet, importance: ImportanceMap, lam: float
) -> ParameterSet:
    """Gradient of ``lam * sum_k Omega_k (theta_prev_k - theta_k)^2``."""
    check_aligned(params, prev, "parameters and previous-center snapshot")
    check_aligned(params, importance, "parameters and importance map")
    return {k: 2.0 * lam * importance[k] * (params[k] - prev[k]) for k in params}


def inverse_importance_gradient(params: ParameterSet, state: RegularizerState, lam: float) -> ParameterSet:
    """Gradient of ``lam * sum_k (theta_prev_k - theta_k)^2 / (1 + Omega_k)``.

    Important parameters are pulled back less, leaving them more freedom.
    """
    if state.importance is None or state.prev_params is None:
        raise ConfigurationError("inverse-importance penalty needs an importance map and a snapshot")
    check_aligned(params, state.prev_params, "parameters and previous-center snapshot")
    check_aligned(params, state.importance, "parameters and importance map")
    return {
        k: 2.0 * lam * (params[k] - state.prev_params[k]) / (1.0 + state.importance[k])
        for k in params
    }


def penalty_gradient(method: str, params: ParameterSet, state: RegularizerState) -> Penalty:
    """Gradient of the parameter-space penalty ``lam * phi(theta_prev, theta)``.

    The returned gradient pulls ``theta`` toward the previous-center snapshot.
    FT, LWF and EBLL have no parameter-space penalty (zeros). Before any
    previous-center artifact exists the result is zero with ``cold_start`` set.
    """
    s = state.settings
    if method in ("ft",) + DISTILLATION_METHODS:
        return Penalty(zeros_like(params))
    if state.prev_params is None:
        logger.debug("%s: no previous-center snapshot yet, penalty is zero", method)
        return Penalty(zeros_like(params), cold_start=True)
    _require_earlier(state.prev_version, state, "previous-center snapshot")
    if method in IMM_METHODS:
        check_aligned(params, state.prev_params, "parameters and previous-center snapshot")
        beta = state.archive.beta
        return Penalty({k: 2.0 * beta * (params[k] - state.prev_params[k]) for k in params})
    if state.importance is None:
        logger.debug("%s: no importance map yet, penalty is zero", method)
        return Penalty(zeros_like(params), cold_start=True)
    _require_earlier(state.importance_version, state, "importance map")
    if method in INVERSE_METHODS:
        return Penalty(inverse_importance_gradient(params, state, s.lam))
    if method in IMPORTANCE_METHODS:
        return Penalty(importance_gradient(params, state.prev_params, state.importance, s.lam))
    raise ConfigurationError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Importance estimators
# ---------------------------------------------------------------------------


def squared_gradient_mean(per_sample_grads: Iterable[ParameterSet]) -> ImportanceMap:
    """Mean of elementwise squared gradients (diagonal empirical Fisher)."""
    total, count = None, 0
    for grad in per_sample_grads:
        if total is None:
            total = {k: v * v for k, v in grad.items()}
        else:
            for k, v in grad.items():
                total[k] += v * v
        count += 1
    if count == 0:
        raise DataError("cannot estimate importance from an empty sample")
    return {k: v / count for k, v in total.items()}


def ewc_fisher(
    model: ModelSpec,
    params: ParameterSet,
    x: np.ndarray,
    y: np.ndarray,
    loss: LossKind = CrossEntropy(),
    head_index: Optional[int] = None,
) -> ImportanceMap:
    """Diagonal empirical Fisher at the true labels over the sample ``(x, y)``."""
    if len(x) == 0:
        raise DataError("cannot estimate Fisher information from an empty sample")
    grads = (loss_and_grad(model, params, x[i : i + 1], y[i : i + 1], loss, head_index)[1] for i in range(len(x)))
    return squared_gradient_mean(grads)


def mas_importance(
    model: ModelSpec,
    params: ParameterSet,
    x: np.ndarray,
    head_index: Optional[int] = None,
    sensitivity: str = "l2",
) -> ImportanceMap:
    """Output sensitivity ``mean_x |d ||M(x)||^2 / d theta|`` (or per-logit absolute gradients)."""
    if len(x) == 0:
        raise DataError("cannot estimate output sensitivity from an empty sample")
    if sensitivity not in ("l2", "per-logit"):
        raise ConfigurationError(f"unknown MAS sensitivity {sensitivity!r}")
    total = zeros_like(params)
    for i in range(len(x)):
        fp = forward_pass(model, params, x[i : i + 1], head_index)
        if sensitivity == "l2":
            seeds = [2.0 * fp.logits]
        else:
            seeds = [np.eye(fp.logits.shape[1])[j : j + 1] for j in range(fp.logits.shape[1])]
        for d_logits in seeds:
            grad = backward(model, params, fp, d_logits)
            for k in total:
                total[k] += np.abs(grad[k])
    return {k: v / len(x) for k, v in total.items()}


def new_si_accumulator(params: ParameterSet) -> SiAccumulator:
    return SiAccumulator(w=zeros_like(params), start=copy_params(params))


def si_track_step(
    acc: SiAccumulator,
    g_task: ParameterSet,
    before: ParameterSet,
    after: ParameterSet,
    sign: float = 1.0,
) -> SiAccumulator:
    """Accumulate ``w_k += sign * g_k * (after_k - before_k)`` for one optimizer step.

    ``g_task`` is the task-loss gradient, not the regularized one.
    """
    check_aligned(acc.w, g_task, "path integral and gradient")
    check_aligned(before, after, "parameters before and after the step")
    return replace(acc, w={k: acc.w[k] + sign * g_task[k] * (after[k] - before[k]) for k in acc.w})


def si_update_importance(
    omega: Optional[ImportanceMap],
    acc: SiAccumulator,
    start: ParameterSet,
    end: ParameterSet,
    epsilon: float = 1e-3,
) -> ImportanceMap:
    """Add this visit's ``w / ((end - start)^2 + epsilon)``, clamped at zero, to ``omega``."""
    check_aligned(start, end, "visit start and end parameters")
    out = {}
    for k in acc.w:
        contribution = np.maximum(acc.w[k] / ((end[k] - start[k]) ** 2 + epsilon), 0.0)
        out[k] = contribution if omega is None else omega[k] + contribution
    return out


# ---------------------------------------------------------------------------
# Loss-level terms
# ---------------------------------------------------------------------------


def distillation_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float = 2.0) -> Term:
    """Soft-label cross-entropy between temperature-softened outputs, scaled by ``T^2``.

    Gradient is with respect to the student logits; the loss is a batch mean.
    """
    if teacher_logits.shape != student_logits.shape:
        raise DataError(
            f"teacher logits {teacher_logits.shape} and student logits {student_logits.shape} differ"
        )
    t = temperature
    p_teacher = np.exp(log_softmax(teacher_logits / t))
    logp_student = log_softmax(student_logits / t)
    batch = student_logits.shape[0]
    value = -t * t * (p_teacher * logp_student).sum() / batch
    grad = t * (np.exp(logp_student) - p_teacher) / batch
    return Term(float(value), grad)


def kd_loss(
    teacher: TeacherSnapshot,
    model: ModelSpec,
    student_logits: np.ndarray,
    batch: np.ndarray,
    head_index: Optional[int] = None,
) -> Term:
    """Distillation against the frozen previous-center model on the current training batch."""
    teacher_logits = forward(model, teacher.params, batch, head_index)
    return distillation_loss(teacher_logits, student_logits, teacher.temperature)


def ebll_loss(encoder: Optional[EncoderState], features_now: np.ndarray, features_prev: np.ndarray) -> Term:
    """``alpha/2 * ||E(F(x, theta)) - E(F(x, theta_prev))||^2`` (batch mean), gradient w.r.t. ``features_now``."""
    if encoder is None:
        return Term(0.0, np.zeros_like(features_now), cold_start=True)
    if features_now.shape != features_prev.shape:
        raise DataError("current and previous features must come from the same batch")
    diff = encoder.encode(features_now) - encoder.encode(features_prev)
    batch = features_now.shape[0]
    value = 0.5 * encoder.alpha * (diff * diff).sum() / batch
    grad = encoder.alpha * diff @ encoder.weights["encoder.weight"].T / batch
    return Term(float(value), grad)


def _reconstruction_mse(weights: ParameterSet, x: np.ndarray, decoder: str) -> float:
    state = EncoderState(weights=weights, decoder=decoder)
    err = state.reconstruct(x) - x
    return float(np.mean(err * err))


def _autoencoder_grad(weights: ParameterSet, x: np.ndarray, decoder: str) -> ParameterSet:
    code = x @ weights["encoder.weight"] + weights["encoder.bias"]
    pre = code @ weights["decoder.weight"] + weights["decoder.bias"]
    recon = np.maximum(pre, 0.0) if decoder == "relu" else pre
    d_pre = 2.0 * (recon - x) / x.size
    if decoder == "relu":
        d_pre = d_pre * (pre > 0)
    d_code = d_pre @ weights["decoder.weight"].T
    return {
        "decoder.bias": d_pre.sum(axis=0),
        "decoder.weight": code.T @ d_pre,
        "encoder.bias": d_code.sum(axis=0),
        "encoder.weight": x.T @ d_code,
    }


def train_autoencoder(
    features: np.ndarray,
    code_dim: int,
    epochs: int = 50,
    seed: int = 0,
    lr: float = 1e-3,
    alpha: float = 1e-3,
    decoder: str = "relu",
    batch_size: int = 32,
) -> EncoderState:
    """Fit an undercomplete autoencoder to feature vectors.

    The encoder starts from the principal subspace of the sample and is refined
    with Adam on the reconstruction MSE; the weights with the lowest full-sample
    MSE seen are returned.
    """
    x = np.asarray(features, dtype=np.float64)
    n, dim = x.shape
    if not 1 <= code_dim <= dim:
        raise ConfigurationError(f"code dimension {code_dim} must lie in [1, {dim}]")
    if n < code_dim + 1:
        raise DataError(f"need at least {code_dim + 1} feature vectors, got {n}")
    if decoder not in ("relu", "linear"):
        raise ConfigurationError(f"unknown decoder activation {decoder!r}")
    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(centered):
        logger.warning("autoencoder features are constant; returning a zero-code encoder")
        weights = {
            "decoder.bias": mean.copy(),
            "decoder.weight": np.zeros((code_dim, dim)),
            "encoder.bias": np.zeros(code_dim),
            "encoder.weight": np.zeros((dim, code_dim)),
        }
        return EncoderState(weights=weights, alpha=alpha, decoder=decoder, degenerate=True)

    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:code_dim]
    weights = {
        "decoder.bias": mean.copy(),
        "decoder.weight": basis.copy(),
        "encoder.bias": -mean @ basis.T,
        "encoder.weight": basis.T.copy(),
    }
    best, best_mse = weights, _reconstruction_mse(weights, x, decoder)
    opt = new_optimizer("adam", weights, lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = x[order[start : start + batch_size]]
            opt, weights = adam_step(opt, weights, _autoencoder_grad(weights, rows, decoder))
        mse = _reconstruction_mse(weights, x, decoder)
        if mse < best_mse:
            best, best_mse = weights, mse
    logger.debug("autoencoder trained: code_dim=%d mse=%.4g", code_dim, best_mse)
    return EncoderState(weights=best, alpha=alpha, decoder=decoder)


# ---------------------------------------------------------------------------
# Model merging
# ---------------------------------------------------------------------------


def _stack(archive: ImmArchive, upto: Optional[int], what: str):
    centers = archive.centers(upto)
    if not centers:
        raise DataError(f"cannot {what}: the model archive has no entries")
    return centers


def imm_merge_mean(archive: ImmArchive, upto: Optional[int] = None) -> ParameterSet:
    """Elementwise arithmetic mean of the archived models of centers ``<= upto``."""
    centers = _stack(archive, upto, "merge")
    names = archive.models[centers[0]].keys()
    return {k: np.mean([archive.models[c][k] for c in centers], axis=0) for k in names}


def imm_mode_weights(
    archive: ImmArchive, upto: Optional[int] = None
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """Per-parameter merge weights ``alpha_k^nu = Omega_k^nu / sum_nu Omega_k^nu``.

    Returns the weights (stacked over centers on axis 0) and a boolean mask of
    entries where every Fisher value is zero; those fall back to uniform weights.
    """
    centers = _stack(archive, upto, "merge")
    missing = [c for c in centers if c not in archive.fishers]
    if missing:
        raise DataError(f"mode merging needs Fisher maps for centers {missing}")
    weights, fallback = {}, {}
    for k in archive.models[centers[0]]:
        fisher = np.stack([archive.fishers[c][k] for c in centers])
        damped = fisher + MERGE_DAMPING
        alpha = damped / damped.sum(axis=0)
        zero = np.all(fisher == 0, axis=0)
        alpha = np.where(zero, 1.0 / len(centers), alpha)
        weights[k], fallback[k] = alpha, zero
    return weights, fallback


def imm_merge_mode(archive: ImmArchive, upto: Optional[int] = None) -> ParameterSet:
    """Fisher-weighted merge of archived models.

    Entries whose Fisher values agree across centers (including all-zero ones)
    are merged by the plain mean, so equal Fisher maps reproduce
    ``imm_merge_mean`` exactly.
    """
    centers = _stack(archive, upto, "merge")
    weights, fallback = imm_mode_weights(archive, upto)
    n_fallback = int(sum(mask.sum() for mask in fallback.values()))
    if n_fallback:
        logger.warning("mode merge: %d parameters with zero Fisher use uniform weights", n_fallback)
    mean = imm_merge_mean(archive, upto)
    merged = {}
    for k, alpha in weights.items():
        models = np.stack([archive.models[c][k] for c in centers])
        fisher = np.stack([archive.fishers[c][k] for c in centers])
        uniform = np.all(fisher == fisher[0], axis=0)
        merged[k] = np.where(uniform, mean[k], (alpha * models).sum(axis=0))
    return merged


# ---------------------------------------------------------------------------
# Lifecycle hooks used by the federation loop
# ---------------------------------------------------------------------------


def begin_visit(state: RegularizerState, params: ParameterSet) -> RegularizerState:
    """Enter a new center visit with the transferred parameters ``theta^(mu-1)``."""
    visit = state.visit + 1
    prev = copy_params(params) if state.visit > 0 else None
    si = new_si_accumulator(params) if importance_kind(state.method) == "si" else None
    return replace(state, visit=visit, prev_params=prev, prev_version=state.visit, si=si)


def loss_terms(
    model: ModelSpec,
    state: RegularizerState,
    params: ParameterSet,
    fp,
    batch: np.ndarray,
) -> Tuple[float, Optional[ParameterSet]]:
    """LWF / EBLL objective terms for one batch: ``(loss, parameter gradient)``.

    Returns ``(0.0, None)`` for methods without loss-level terms or before a
    teacher exists.
    """
    method, s = state.method, state.settings
    if method not in DISTILLATION_METHODS or state.teacher is None:
        return 0.0, None
    teacher = state.teacher
    _require_earlier(teacher.version, state, "teacher snapshot")
    head = teacher.head_index if model.is_multi_head else None
    distill_fp = fp if head == fp.head_index or not model.is_multi_head else forward_pass(model, params, batch, head)
    kd = kd_loss(teacher, model, distill_fp.logits, batch, head)
    total_loss = s.lam * kd.loss
    grad = backward(model, params, distill_fp, s.lam * kd.grad)
    if method == "ebll" and state.encoder is not None:
        _require_earlier(state.encoder.version, state, "encoder")
        code = ebll_loss(state.encoder, fp.features, extract_features(model, teacher.params, batch))
        total_loss += code.loss
        code_grad = backward(model, params, fp, np.zeros_like(fp.logits), code.grad)
        grad = {k: grad[k] + code_grad[k] for k in grad}
    return total_loss, grad


def track_step(
    state: RegularizerState, g_task: ParameterSet, before: ParameterSet, after: ParameterSet
) -> RegularizerState:
    if state.si is None:
        return state
    return replace(state, si=si_track_step(state.si, g_task, before, after, state.settings.si_path_sign))


def end_visit(
    model: ModelSpec,
    state: RegularizerState,
    params: ParameterSet,
    x: np.ndarray,
    y: np.ndarray,
    center: int,
    loss: LossKind = CrossEntropy(),
    head_index: Optional[int] = None,
    seed: int = 0,
) -> RegularizerState:
    """Produce this visit's artifacts from the shared (best-validation) parameters."""
    method, s, visit = state.method, state.settings, state.visit
    kind = importance_kind(method)
    if kind is not None:
        if kind == "si":
            if state.si is None:
                raise ConfigurationError("SI visit ended without a path-integral accumulator")
            importance = si_update_importance(state.importance, state.si, state.si.start, params, s.si_epsilon)
        else:
            if kind == "ewc":
                fresh = ewc_fisher(model, params, x, y, loss, head_index)
            else:
                fresh = mas_importance(model, params, x, head_index, s.mas_sensitivity)
            importance = fresh if state.importance is None else {
                k: state.importance[k] + fresh[k] for k in fresh
            }
        state = replace(state, importance=importance, importance_version=visit)
    if method in DISTILLATION_METHODS:
        teacher = TeacherSnapshot(copy_params(params), s.temperature, head_index, version=visit)
        state = replace(state, teacher=teacher)
    if method == "ebll":
        features = extract_features(model, params, x)
        code_dim = s.ebll_code_dim or max(1, features.shape[1] // 4)
        encoder = train_autoencoder(
            features, code_dim, s.ebll_epochs, seed=seed, lr=s.ebll_lr, alpha=s.ebll_alpha, decoder=s.ebll_decoder
        )
        state = replace(state, encoder=replace(encoder, version=visit))
    if method in IMM_METHODS:
        models = dict(state.archive.models)
        fishers = dict(state.archive.fishers)
        models[center] = copy_params(params)
        if method == "imm-mode":
            fishers[center] = ewc_fisher(model, params, x, y, loss, head_index)
        state = replace(state, archive=replace(state.archive, models=models, fishers=fishers))
    return state


def evaluation_params(state: RegularizerState, params: ParameterSet, final: bool = False) -> ParameterSet:
    """Parameters to evaluate after a visit: the IMM merge for IMM methods, else ``params``."""
    if state.method not in IMM_METHODS or not state.archive.models:
        return params
    if state.settings.imm_merge == "end" and not final:
        return params
    if state.method == "imm-mean":
        return imm_merge_mean(state.archive)
    return imm_merge_mode(state.archive)
