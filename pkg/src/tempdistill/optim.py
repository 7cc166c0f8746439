from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamWState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamWState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               hyper: AdamWHyper, lr: float | None = None) -> Tuple[List[np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update with bias-corrected moments.

    Returns fresh arrays; the inputs are left untouched. ``lr`` overrides
    ``hyper.lr`` (used by the schedule).
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer state disagree in length")
    lr = hyper.lr if lr is None else lr
    step = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** step
    bc2 = 1.0 - hyper.beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        p = p * (1.0 - lr * hyper.weight_decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamWState(step, new_m, new_v)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
