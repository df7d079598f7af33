"""Adam optimizer with stepped learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError


@dataclass
class LrSchedule:
    """base * decay^(epoch // every); ``every=0`` means a constant rate."""

    base: float
    decay: float = 1.0
    every: int = 0

    def at(self, epoch):
        if self.every <= 0 or self.decay == 1.0:
            return self.base
        return self.base * self.decay ** (epoch // self.every)


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the step counter and schedule."""

    schedule: LrSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(store, grads, state, epoch=0):
    """One Adam update of every trainable parameter with a gradient.

    Frozen parameters and parameters absent from ``grads`` are left
    untouched. The step counter advances even if all gradients are zero.
    Non-finite gradients abort with the offending parameter's name.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.schedule.at(epoch)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, tensor in store.items():
        if not tensor.requires_grad or name not in grads:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}", step=name)
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        tensor.data = tensor.data - lr * mhat / (np.sqrt(vhat) + eps)
    return store, state
