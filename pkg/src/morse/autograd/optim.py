from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def adamw_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update (decoupled weight decay), then clear the gradients.

    Every parameter must carry a gradient; moments and the step count are
    kept on the parameter itself.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    b1, b2 = betas
    for p in params:
        g = p.grad
        p.step += 1
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.exp_avg *= b1
        p.exp_avg += (1.0 - b1) * g
        p.exp_avg_sq *= b2
        p.exp_avg_sq += (1.0 - b2) * (g * g)
        bc1 = 1.0 - b1**p.step
        bc2 = 1.0 - b2**p.step
        denom = np.sqrt(p.exp_avg_sq / bc2) + eps
        p.data -= (lr / bc1) * (p.exp_avg / denom)
        p.grad = None
