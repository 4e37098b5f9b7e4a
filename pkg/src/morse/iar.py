"""Point-wise refinement of a coarse segmentation.

Pipeline: rank pixels by the top-two logit margin, pick a mix of uncertain
and uniformly drawn pixels, encode their coordinates with a trainable
sinusoidal bank, concatenate with the coarse features sampled there, and
re-predict class logits with a small MLP. Rendered logits overwrite the
coarse ones at the selected pixels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import MLP, Module, Parameter, Tensor, ops
from .autograd.nn import init_rng

UNCERTAIN = 1
UNIFORM = 0


def uncertainty_map(logits) -> np.ndarray:
    """``second_largest(v) - max(v)`` per pixel for logits ``[K, H, W]``.

    Always <= 0; zero where the top two classes tie.
    """
    v = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if v.shape[0] < 2:
        raise ValueError(f"uncertainty needs at least 2 classes, got {v.shape[0]}")
    top2 = np.partition(v, v.shape[0] - 2, axis=0)[-2:]
    return top2[0] - top2[1]


@dataclass
class PointSet:
    coords: np.ndarray  # [P, 2] integer (x=column, y=row)
    origin: np.ndarray  # [P] UNCERTAIN / UNIFORM
    uncertainty: np.ndarray  # [P] margin value at each point

    @property
    def count(self) -> int:
        return int(self.coords.shape[0])

    @classmethod
    def empty(cls) -> "PointSet":
        return cls(np.zeros((0, 2), np.int64), np.zeros(0, np.int8), np.zeros(0))

    def flat_index(self, width: int) -> np.ndarray:
        return self.coords[:, 1] * width + self.coords[:, 0]


def n_uncertain(n_points: int, rho: float) -> int:
    return int(np.floor(rho * n_points + 0.5))


def select_points(logits, n_points: int, k_p: int, rho: float, rng: np.random.Generator) -> PointSet:
    """Uncertainty-biased point selection on one ``[K, H, W]`` logit map.

    1. draw ``k_p * n_points`` distinct candidate pixels uniformly (capped
       at the pixel count),
    2. keep the ``round(rho * n_points)`` candidates with the largest
       uncertainty, ties broken by row-major pixel index,
    3. fill up with pixels drawn uniformly from everything not yet chosen.
    """
    if k_p < 1:
        raise ValueError("k_p must be >= 1")
    if not 0.5 < rho < 1:
        raise ValueError("rho must satisfy 0.5 < rho < 1")
    u = uncertainty_map(logits)
    H, W = u.shape
    total = H * W
    if n_points > total:
        raise ValueError(f"cannot select {n_points} points from {total} pixels")
    if n_points == 0:
        return PointSet.empty()
    flat_u = u.reshape(-1)
    n_cand = min(k_p * n_points, total)
    cand = rng.choice(total, size=n_cand, replace=False)
    n_unc = n_uncertain(n_points, rho)
    order = np.lexsort((cand, -flat_u[cand]))
    chosen = cand[order[:n_unc]]
    taken = np.zeros(total, dtype=bool)
    taken[chosen] = True
    rest = np.flatnonzero(~taken)
    extra = rng.choice(rest, size=n_points - n_unc, replace=False)
    idx = np.concatenate([chosen, extra])
    origin = np.concatenate([np.full(n_unc, UNCERTAIN, np.int8), np.full(extra.size, UNIFORM, np.int8)])
    coords = np.stack([idx % W, idx // W], axis=1).astype(np.int64)
    return PointSet(coords, origin, flat_u[idx])


class PositionalEncoder(Module):
    """Trainable Fourier bank ``{(w_i, v_i)}``, Gaussian-initialised."""

    def __init__(self, n_freq: int = 128, init_std: float = 1.0, seed: int = 0, name: str = "iar.pe"):
        rng = init_rng(seed, name)
        self.freqs = Parameter(rng.normal(0.0, init_std, (n_freq, 2)), f"{name}.freqs", np.float32)

    @property
    def n_freq(self) -> int:
        return self.freqs.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.n_freq

    def forward(self, coords, height: int, width: int) -> Tensor:
        return encode_positions(self, coords, height, width)


def standardize(coords, height: int, width: int) -> np.ndarray:
    """Pixel coordinates ``(x=col, y=row)`` to ``[-1, 1]``: ``2x/W - 1``, ``2y/H - 1``."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if c.size and ((c[:, 0] < 0).any() or (c[:, 0] > width - 1).any() or (c[:, 1] < 0).any() or (c[:, 1] > height - 1).any()):
        raise IndexError(f"coordinates outside the {height}x{width} image")
    return np.stack([2.0 * c[:, 0] / width - 1.0, 2.0 * c[:, 1] / height - 1.0])


def encode_positions(pe: PositionalEncoder, coords, height: int, width: int) -> Tensor:
    """``[2L, P]``: rows ``sin(2pi (w_i x + v_i y))`` for all i, then the cosines."""
    return encode_standardized(pe, standardize(coords, height, width))


def encode_standardized(pe: PositionalEncoder, xy) -> Tensor:
    """Encode ``[2, P]`` coordinates already in ``[-1, 1]``."""
    xy = np.asarray(xy, dtype=pe.freqs.dtype)
    proj = ops.mul(ops.matmul(pe.freqs, Tensor(xy)), 2.0 * np.pi)
    return ops.concat([ops.sin(proj), ops.cos(proj)], axis=0)


class RenderingHead(Module):
    """Three-layer per-point MLP: ``[2L + C] -> hidden -> hidden -> K``."""

    def __init__(self, in_dim: int, num_classes: int, hidden=(256, 256), seed: int = 0):
        self.mlp = MLP([in_dim, *hidden, num_classes], seed, "iar.head")
        self.in_dim = in_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(x)


def render_points(head: RenderingHead, pe_feats: Tensor, coarse_point_feats: Tensor) -> Tensor:
    if pe_feats.shape[-1] != coarse_point_feats.shape[-1]:
        raise ValueError(f"point count mismatch: {pe_feats.shape[-1]} vs {coarse_point_feats.shape[-1]}")
    dim = pe_feats.shape[0] + coarse_point_feats.shape[0]
    if dim != head.in_dim:
        raise ValueError(f"head expects {head.in_dim} input features, got {dim}")
    return head(ops.concat([pe_feats, coarse_point_feats], axis=0))


def labels_at(label_map: np.ndarray, pts: PointSet) -> np.ndarray:
    return np.asarray(label_map)[pts.coords[:, 1], pts.coords[:, 0]]


def render_loss(point_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over points; ``point_logits`` is ``[K, P]``."""
    return ops.cross_entropy(point_logits, np.asarray(labels), axis=0)


def stitch(coarse_logits, pts: PointSet, point_logits) -> np.ndarray:
    """Copy of ``[K, H, W]`` coarse logits with the selected pixels overwritten."""
    base = coarse_logits.data if isinstance(coarse_logits, Tensor) else np.asarray(coarse_logits)
    rendered = point_logits.data if isinstance(point_logits, Tensor) else np.asarray(point_logits)
    out = base.copy()
    if pts.count:
        out[:, pts.coords[:, 1], pts.coords[:, 0]] = rendered
    return out


def write_points_csv(path, pts: PointSet) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "origin", "uncertainty"])
        for (x, y), o, u in zip(pts.coords, pts.origin, pts.uncertainty):
            w.writerow([int(x), int(y), "uncertain" if o == UNCERTAIN else "uniform", repr(float(u))])
