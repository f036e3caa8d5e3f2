"""Adam updates with L2 weight decay and a step-wise learning-rate schedule.

Weight decay is folded into the gradient (classic Adam-with-L2, not the
decoupled variant).  Updates are pure: new parameter and state dicts are
returned and the inputs are never mutated.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DimensionError

__all__ = [
    "AdamState",
    "LrSchedule",
    "adam_init",
    "adam_step",
    "lr_at",
]


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_init(params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Zeroed accumulators shaped like ``params`` (a name -> array dict)."""
    return AdamState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        step=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
    )


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update over a name -> array parameter dict.

    Returns (new_params, new_state); weight decay enters as an additive
    ``weight_decay * theta`` gradient term.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    if set(params) != set(grads):
        raise DimensionError(
            f"adam_step: parameter/gradient name mismatch: {sorted(set(params) ^ set(grads))}"
        )
    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name in params:
        theta = params[name]
        grad = np.asarray(grads[name])
        if grad.shape != theta.shape:
            raise DimensionError(
                f"adam_step: gradient shape {grad.shape} != parameter shape {theta.shape} for {name!r}"
            )
        if state.weight_decay:
            grad = grad + state.weight_decay * theta
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * np.square(grad)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = theta - lr * update
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, step=step)


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant rate: ``base`` until the first threshold epoch,
    then the rate of the largest threshold at or below the epoch."""

    base: float
    steps: tuple = field(default_factory=tuple)  # ((epoch, rate), ...)

    def __post_init__(self):
        if self.base <= 0:
            raise ConfigurationError(f"LrSchedule: base rate must be > 0, got {self.base}")
        last = -1
        for epoch, rate in self.steps:
            if epoch <= last:
                raise ConfigurationError(f"LrSchedule: thresholds must be strictly increasing, got {self.steps}")
            if rate <= 0:
                raise ConfigurationError(f"LrSchedule: rates must be > 0, got {rate}")
            last = epoch


def lr_at(schedule, epoch):
    """Learning rate in effect at the given epoch."""
    if epoch < 0:
        raise ValueError(f"lr_at: epoch must be >= 0, got {epoch}")
    rate = schedule.base
    for threshold, value in schedule.steps:
        if epoch >= threshold:
            rate = value
    return rate
