"""AdamW with decoupled weight decay and cyclical learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

POLICIES = ("triangular", "cosine")


@dataclass(frozen=True)
class LrSchedule:
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycle_length: int = 4000
    policy: str = "triangular"

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be at least 2")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown lr policy {self.policy!r}; expected one of {POLICIES}")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Learning rate at iteration ``t``; minimum at cycle start, maximum at half cycle."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    phase = (t % schedule.cycle_length) / schedule.cycle_length
    if schedule.policy == "triangular":
        frac = 1.0 - abs(2.0 * phase - 1.0)
    else:
        frac = 0.5 * (1.0 - math.cos(2.0 * math.pi * phase))
    return schedule.lr_min + (schedule.lr_max - schedule.lr_min) * frac


class MissingGradientError(RuntimeError):
    pass


class AdamW:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, allow_missing: bool = False):
        b1, b2 = self.betas
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing and not allow_missing:
            raise MissingGradientError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.data * (1.0 - lr * self.weight_decay) if self.weight_decay else p.data
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

