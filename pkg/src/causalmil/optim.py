"""Adam with decoupled weight decay, plus a single-cycle cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .diffmath import Tensor
from .errors import ConfigError, DimensionError

__all__ = ["OptimizerState", "adam_step", "cosine_lr"]


@dataclass
class OptimizerState:
    """Adam moments and schedule hyperparameters.

    Weight decay is decoupled: after the Adam move each parameter is
    shrunk by ``lr * weight_decay * p`` rather than having decay folded
    into the gradient.
    """

    base_lr: float = 1e-4
    weight_decay: float = 1e-3
    eta_min: float = 1e-6
    horizon: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, list] = field(default_factory=dict)  # name -> [m, v, steps]

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if self.base_lr <= 0 or self.eta_min < 0:
            raise ConfigError("learning rates must be positive")
        if self.horizon < 1:
            raise ConfigError("schedule horizon must be at least 1")


def cosine_lr(state: OptimizerState, t: float) -> float:
    """Single-cycle cosine annealing from base_lr (t=0) to eta_min (t=horizon)."""
    if t <= 0:
        return state.base_lr
    if t >= state.horizon:
        return state.eta_min
    frac = t / state.horizon
    return state.eta_min + 0.5 * (state.base_lr - state.eta_min) * (1.0 + math.cos(math.pi * frac))


def adam_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    lr: float | None = None,
) -> None:
    """One Adam update over every parameter that holds a gradient.

    Parameters with ``grad is None`` are untouched (no decay either);
    iteration follows the mapping's insertion order so updates are
    deterministic.
    """
    if lr is None:
        lr = state.base_lr
    state.step_count += 1
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
            )
        if name not in state.moments:
            state.moments[name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
        slot = state.moments[name]
        m, v = slot[0], slot[1]
        slot[2] += 1
        t = slot[2]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
