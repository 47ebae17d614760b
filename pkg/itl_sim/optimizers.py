"""SGD with an exponential schedule and Adam with bias-corrected moments.

Optimizer states are immutable values: every step returns a new state and new
parameters, so a state can be checkpointed, transferred to the next center and
reloaded without aliasing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Collection, Optional, Tuple, Union

import numpy as np

from .errors import ConfigurationError, NumericalError
from .tensor_nn import ParameterSet, check_aligned, zeros_like

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("adam", "sgd")
DEFAULT_LR = {"adam": 0.001, "sgd": 0.1}


@dataclass(frozen=True)
class SgdState:
    """Plain SGD with ``r = base_lr * decay_base ** (epoch / decay_period)``, times monitor halvings."""

    base_lr: float = 0.1
    decay_base: float = 0.8
    decay_period: float = 5.0
    epoch: int = 0
    halving: float = 1.0

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay_base ** (self.epoch / self.decay_period) * self.halving


@dataclass(frozen=True)
class AdamState:
    m: ParameterSet
    v: ParameterSet
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    base_lr: float = 0.001
    halving: float = 1.0

    @property
    def lr(self) -> float:
        return self.base_lr * self.halving


OptimizerState = Union[SgdState, AdamState]


def new_optimizer(
    kind: str,
    params: ParameterSet,
    lr: Optional[float] = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
    decay_base: float = 0.8,
    decay_period: float = 5.0,
) -> OptimizerState:
    """Fresh optimizer state for ``params`` (``t = 0``, zero moments, epoch 0)."""
    if kind not in OPTIMIZER_KINDS:
        raise ConfigurationError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZER_KINDS}")
    lr = DEFAULT_LR[kind] if lr is None else lr
    if not lr > 0:
        raise ConfigurationError("learning rate must be positive")
    if kind == "sgd":
        return SgdState(base_lr=lr, decay_base=decay_base, decay_period=decay_period)
    return AdamState(
        m=zeros_like(params),
        v=zeros_like(params),
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        base_lr=lr,
    )


def _check_finite(grad: ParameterSet) -> None:
    for name, value in grad.items():
        if not np.all(np.isfinite(value)):
            raise NumericalError("non-finite gradient entry", parameter=name)


def adam_step(
    state: AdamState, params: ParameterSet, grad: ParameterSet, frozen: Collection[str] = ()
) -> Tuple[AdamState, ParameterSet]:
    """One Adam update.

    Parameters
    ----------
    state : AdamState
        Moments ``m``, ``v`` and step counter ``t`` before the update.
    params : ParameterSet
        Current parameters ``theta``.
    grad : ParameterSet
        Gradient to apply, already including any regularizer contribution.
    frozen : collection of str, optional
        Parameters left untouched by this step, moments included (e.g. the
        classifiers of inactive centers in a multi-head model).

    Returns
    -------
    tuple of (AdamState, ParameterSet)
        The advanced state (``t + 1``) and the updated parameters. Inputs are not modified.
    """
    check_aligned(params, grad, "parameters and gradient")
    check_aligned(params, state.m, "parameters and optimizer moments")
    _check_finite(grad)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    lr = state.lr
    m, v, new_params = {}, {}, {}
    for name in params:
        if name in frozen:
            m[name], v[name], new_params[name] = state.m[name], state.v[name], params[name]
            continue
        g = grad[name]
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, m=m, v=v, t=t), new_params


def sgd_step(
    state: SgdState, params: ParameterSet, grad: ParameterSet, frozen: Collection[str] = ()
) -> Tuple[SgdState, ParameterSet]:
    check_aligned(params, grad, "parameters and gradient")
    _check_finite(grad)
    lr = state.lr
    return state, {name: params[name] if name in frozen else params[name] - lr * grad[name] for name in params}


def step(
    state: OptimizerState, params: ParameterSet, grad: ParameterSet, frozen: Collection[str] = ()
) -> Tuple[OptimizerState, ParameterSet]:
    if isinstance(state, AdamState):
        return adam_step(state, params, grad, frozen)
    return sgd_step(state, params, grad, frozen)


def inject_regularized_gradient(grad: ParameterSet, reg_grad: ParameterSet) -> ParameterSet:
    """``g' = g + reg_grad``; optimizer moments are then computed on ``g'``."""
    check_aligned(grad, reg_grad, "task and regularizer gradients")
    return {name: grad[name] + reg_grad[name] for name in grad}


def halve_learning_rate(state: OptimizerState) -> OptimizerState:
    halved = replace(state, halving=state.halving * 0.5)
    logger.debug("learning rate halved to %.3g", halved.lr)
    return halved


def advance_epoch(state: OptimizerState) -> OptimizerState:
    """Count one finished epoch toward the SGD schedule; Adam keeps a fixed rate."""
    if isinstance(state, SgdState):
        return replace(state, epoch=state.epoch + 1)
    return state
