"""AdamW with per-parameter rate multipliers, and the warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class OptState:
    """Moments, step counter and hyperparameters for :func:`adamw_step`.

    ``rate_scale`` maps a parameter name to its learning-rate multiplier;
    missing names use 1.0. ``no_decay`` lists names exempt from weight decay.
    """

    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rate_scale: dict[str, float] = field(default_factory=dict)
    no_decay: set[str] = field(default_factory=set)


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptState, lr: float | None = None) -> dict[str, np.ndarray]:
    """Apply one decoupled-weight-decay Adam update in place and return ``params``.

    ``lr`` overrides ``state.lr`` for this step (used by the schedule).
    """
    state.step += 1
    t = state.step
    rate = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step_rate = rate * state.rate_scale.get(name, 1.0)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and name not in state.no_decay:
            update = update + state.weight_decay * p
        p -= (step_rate * update).astype(p.dtype, copy=False)
    return params


def cosine_lr(step: int, warmup_steps: int, total_steps: int, base_rate: float) -> float:
    """Linear warmup from 0 to ``base_rate`` then half-cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be below total_steps")
    if step < warmup_steps:
        return base_rate * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_rate * (1.0 + math.cos(math.pi * progress))
