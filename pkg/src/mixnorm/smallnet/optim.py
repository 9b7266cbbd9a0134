"""Optimizers and learning-rate schedules.

RMSprop keeps a running mean of squared gradients (decay 0.9) and adds
heavy-ball momentum on top of the rescaled step. Weight decay is coupled:
``weight_decay * w`` is added to the gradient of conv and dense weights.
"""

import math
from dataclasses import dataclass, field

import numpy as np

OPTIMIZERS = ("sgd_momentum", "nesterov", "rmsprop")


@dataclass
class ExponentialSchedule:
    rate: float = 0.93
    every_n_epochs: int = 2

    def factor(self, epoch, total_epochs=None):
        return self.rate ** (epoch // self.every_n_epochs)


@dataclass
class StepSchedule:
    """Divide the rate by ``factor`` at each fraction of the run."""

    fractions: tuple = (0.5, 0.75)
    factor_: float = 10.0

    def factor(self, epoch, total_epochs):
        passed = sum(epoch >= math.ceil(f * total_epochs) for f in self.fractions)
        return self.factor_ ** -passed


@dataclass
class ConstantSchedule:
    def factor(self, epoch, total_epochs=None):
        return 1.0


@dataclass
class OptimizerSpec:
    kind: str = "rmsprop"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: object = field(default_factory=ConstantSchedule)
    rms_decay: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"optimizer kind must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if isinstance(self.schedule, StepSchedule):
            fr = list(self.schedule.fractions)
            if any(not 0 < f < 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
                raise ValueError("step fractions must be strictly increasing inside (0, 1)")

    def lr_at(self, epoch, total_epochs=None):
        return self.lr * self.schedule.factor(epoch, total_epochs)


def schedule_from_dict(d):
    if not d:
        return ConstantSchedule()
    kind = d.get("kind", "constant")
    if kind == "exponential":
        return ExponentialSchedule(float(d.get("rate", 0.93)), int(d.get("every_n_epochs", 2)))
    if kind == "steps":
        return StepSchedule(tuple(d.get("fractions", (0.5, 0.75))), float(d.get("factor", 10.0)))
    if kind == "constant":
        return ConstantSchedule()
    raise ValueError(f"unknown schedule kind {kind!r}")


class Optimizer:
    def __init__(self, spec):
        self.spec = spec
        self.state = {}

    def step(self, net, lr):
        s = self.spec
        for i, name, w, g, decays in net.parameters():
            if decays and s.weight_decay:
                g = g + s.weight_decay * w
            key = (i, name)
            if s.kind == "sgd_momentum":
                v = self.state.get(key, 0.0)
                v = s.momentum * v - lr * g
                w += v
                self.state[key] = v
            elif s.kind == "nesterov":
                v_old = self.state.get(key, 0.0)
                v = s.momentum * v_old - lr * g
                w += -s.momentum * v_old + (1 + s.momentum) * v
                self.state[key] = v
            else:
                ms, mom = self.state.get(key, (0.0, 0.0))
                ms = s.rms_decay * ms + (1 - s.rms_decay) * g * g
                mom = s.momentum * mom + lr * g / np.sqrt(ms + s.eps)
                w -= mom
                self.state[key] = (ms, mom)
