"""AdamW with decoupled weight decay, and cosine learning-rate annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamWState,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamWState:
    """One in-place AdamW update. Missing gradients are treated as zeros."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return state


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total)))
