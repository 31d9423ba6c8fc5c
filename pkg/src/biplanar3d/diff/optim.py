"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .array import DiffArray


@dataclass
class Schedule:
    base_lr: float = 3e-5
    warmup_epochs: float = 20
    total_epochs: float = 250


def lr_at(epoch: float, schedule: Schedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_epochs``."""
    base, warm, total = schedule.base_lr, schedule.warmup_epochs, schedule.total_epochs
    if epoch < warm:
        return base * epoch / warm
    if epoch >= total:
        return 0.0
    progress = (epoch - warm) / (total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    weight_decay: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Schedule = field(default_factory=Schedule)


def adamw_step(params: dict[str, DiffArray], state: OptimizerState, lr: float,
               grads: dict[str, np.ndarray] | None = None) -> None:
    """One in-place AdamW update (PyTorch ordering: decay, then moment update).

    Parameters without a gradient are left untouched.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        dt = p.value.dtype
        g = g.astype(dt, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        if state.weight_decay:
            p.value *= dt.type(1.0 - lr * state.weight_decay)
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        denom = np.sqrt(v / dt.type(c2)) + dt.type(state.eps)
        p.value -= dt.type(lr / c1) * m / denom
