"""Adam with a staircase exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from milsurv.errors import NumericalError, ValidationError


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 5e-4
    decay_steps: int = 10000
    decay_rate: float = 0.95

    def at(self, step: int) -> float:
        return self.initial * self.decay_rate ** (step // self.decay_steps)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.t, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state: AdamState, schedule: LrSchedule, step: int):
    """Return updated ``(params, state)``; inputs are not modified."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValidationError("parameter and gradient shapes differ")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("numerical blowup")
    lr = schedule.at(step)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)
