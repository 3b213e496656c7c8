"""Optimisers and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from gslab.errors import DimensionError, FiniteValueError


def _check_grads(params, grads):
    for name, g in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise FiniteValueError(f"non-finite gradient for {name!r}")


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place for every name present in ``grads``."""
        _check_grads(params, grads)
        self.steps += 1
        for name, g in grads.items():
            if self.momentum:
                v = self.velocity.setdefault(name, np.zeros_like(g))
                v *= self.momentum
                v += g
                g = v
            params[name] -= self.lr * g


class Adam:
    """Adam with bias-corrected moments.

    Only parameters that appear in ``grads`` are touched, so freezing is just
    a matter of leaving names out.
    """

    def __init__(self, lr: float = 1e-3, betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict, grads: dict) -> None:
        _check_grads(params, grads)
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float):
    kind = kind.lower()
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass(frozen=True)
class StepDecay:
    step_epochs: int
    gamma: float = 0.1
    t_max: Optional[int] = None


@dataclass(frozen=True)
class CosineAnnealing:
    t_max: int
    eta_min: float = 0.0


Schedule = Union[StepDecay, CosineAnnealing]


def lr_at(schedule: Optional[Schedule], epoch: int, base_lr: float) -> float:
    if schedule is None:
        return base_lr
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if isinstance(schedule, CosineAnnealing):
        if epoch > schedule.t_max:
            raise ValueError(f"epoch {epoch} beyond T_max={schedule.t_max}")
        return schedule.eta_min + 0.5 * (base_lr - schedule.eta_min) * (1.0 + math.cos(math.pi * epoch / schedule.t_max))
    if schedule.t_max is not None and epoch > schedule.t_max:
        raise ValueError(f"epoch {epoch} beyond T_max={schedule.t_max}")
    return base_lr * schedule.gamma ** (epoch // max(schedule.step_epochs, 1))
