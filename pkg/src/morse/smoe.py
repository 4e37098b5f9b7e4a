"""Stochastic mixture-of-experts fusion of upsampled decoder features.

Dropped experts are removed *before* the softmax, so the surviving gate
weights still sum to one at every pixel and the dropped ones are exactly
zero. No rescaling is needed at test time, where every expert is active.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import MLP, Conv2d, Module, Tensor, ops

MAX_MASK_RETRIES = 16


@dataclass
class ExpertMask:
    """Per-sample activity flags, shape ``[B, N]`` (or ``[N]`` for one sample)."""

    active: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)
        if not self.active.any(axis=-1).all():
            raise ValueError("expert mask must keep at least one expert per sample")

    @classmethod
    def all_active(cls, n: int, batch: int | None = None) -> "ExpertMask":
        shape = (n,) if batch is None else (batch, n)
        return cls(np.ones(shape, dtype=bool), 0.0)


@dataclass
class GateWeights:
    W: Tensor  # [B, N, H, W]


def sample_mask(n: int, alpha: float, rng: np.random.Generator, training: bool = True) -> ExpertMask:
    """Drop each expert independently with probability ``alpha``.

    An all-dropped draw is redrawn up to ``MAX_MASK_RETRIES`` times, after
    which one expert is kept uniformly at random. At inference every expert
    is active.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if not training or alpha == 0.0:
        return ExpertMask(np.ones(n, dtype=bool), alpha)
    for _ in range(MAX_MASK_RETRIES):
        keep = rng.random(n) >= alpha
        if keep.any():
            return ExpertMask(keep, alpha)
    keep = np.zeros(n, dtype=bool)
    keep[rng.integers(n)] = True
    return ExpertMask(keep, alpha)


def sample_batch_mask(n: int, batch: int, alpha: float, rng: np.random.Generator, training: bool = True) -> ExpertMask:
    rows = [sample_mask(n, alpha, rng, training).active for _ in range(batch)]
    return ExpertMask(np.stack(rows), alpha)


class SMoE(Module):
    """Gating conv stack plus the fusion MLP."""

    def __init__(self, n_experts: int, expert_dim: int, gate_channels, mlp_hidden, seed: int):
        chans = [n_experts * expert_dim, *gate_channels, n_experts]
        self.gate = [Conv2d(chans[i], chans[i + 1], seed, f"smoe.gate.{i}") for i in range(len(chans) - 1)]
        self.fusion = MLP([expert_dim, *mlp_hidden, expert_dim], seed, "smoe.fusion")
        self.n_experts = n_experts

    def gate_logits(self, features: list[Tensor]) -> Tensor:
        h = ops.concat(features, axis=1)
        for i, conv in enumerate(self.gate):
            h = conv(h)
            if i < len(self.gate) - 1:
                h = ops.relu(h)
        return h

    def forward(self, features: list[Tensor], mask: ExpertMask | None = None) -> tuple[Tensor, GateWeights]:
        weights = gate_weights(self, features, mask)
        return fuse_experts(self, features, weights), weights


def gate_weights(smoe: SMoE, features: list[Tensor], mask: ExpertMask | None = None) -> GateWeights:
    if len(features) != smoe.n_experts:
        raise ValueError(f"expected {smoe.n_experts} expert maps, got {len(features)}")
    shape = features[0].shape
    for i, f in enumerate(features):
        if f.shape != shape:
            raise ValueError(f"expert {i} has shape {f.shape}, expert 0 has {shape}")
    logits = smoe.gate_logits(features)
    if mask is None:
        return GateWeights(ops.softmax(logits, axis=1))
    active = mask.active
    if active.ndim == 1:
        active = np.broadcast_to(active, (shape[0], active.size))
    if active.shape != (shape[0], smoe.n_experts):
        raise ValueError(f"mask shape {active.shape} does not match batch {shape[0]} x {smoe.n_experts} experts")
    if not active.any(axis=1).all():
        raise ValueError("every expert is masked for some sample")
    return GateWeights(ops.softmax(logits, axis=1, mask=active[:, :, None, None]))


def weighted_sum(features: list[Tensor], weights: GateWeights) -> Tensor:
    """Pixel-wise ``sum_i W_i * F_i`` before the fusion MLP."""
    W = weights.W
    total = None
    for i, f in enumerate(features):
        term = ops.mul(ops.getitem(W, (slice(None), slice(i, i + 1))), f)
        total = term if total is None else ops.add(total, term)
    return total


def fuse_experts(smoe: SMoE, features: list[Tensor], weights: GateWeights) -> Tensor:
    return smoe.fusion(weighted_sum(features, weights))
