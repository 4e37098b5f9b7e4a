"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    worst: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _eval(fn, leaves, values) -> float:
    saved = [t.data for t in leaves]
    try:
        for t, v in zip(leaves, values):
            t.data = v
        return float(np.asarray(fn().data, dtype=np.float64))
    finally:
        for t, s in zip(leaves, saved):
            t.data = s


def grad_check(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    tol: float | None = None,
    n_samples: int = 12,
    rng: np.random.Generator | None = None,
    step: float | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` reads the current ``.data`` of ``leaves``. Analytic gradients are
    taken at the leaves' own dtype; the finite differences are always
    evaluated in float64 on an upcast copy, so a float32 check measures the
    float32 backward against a clean reference.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = 1e-3 * max |n|`` over the sampled entries, which keeps entries
    with near-zero gradient from dominating.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    leaves = list(leaves)
    dtype = leaves[0].dtype
    if tol is None:
        tol = 1e-6 if dtype == np.float64 else 1e-3
    for t in leaves:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64) for t in leaves]
    for t in leaves:
        t.grad = None

    base = [t.data.astype(np.float64) for t in leaves]
    a_vals, n_vals, labels = [], [], []
    for li, (t, b) in enumerate(zip(leaves, base)):
        flat_n = b.size
        picks = rng.choice(flat_n, size=min(n_samples, flat_n), replace=False)
        for idx in picks:
            x0 = b.reshape(-1)[idx]
            h = step if step is not None else 1e-5 * max(1.0, abs(x0))
            plus = [v.copy() for v in base]
            minus = [v.copy() for v in base]
            plus[li].reshape(-1)[idx] += h
            minus[li].reshape(-1)[idx] -= h
            num = (_eval(fn, leaves, plus) - _eval(fn, leaves, minus)) / (2 * h)
            a_vals.append(analytic[li].reshape(-1)[idx])
            n_vals.append(num)
            labels.append(f"leaf{li}[{idx}]")
    a = np.asarray(a_vals)
    n = np.asarray(n_vals)
    floor = max(1e-3 * np.abs(n).max(initial=0.0), 1e-12)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    worst = int(rel.argmax()) if rel.size else 0
    return GradCheckReport(
        max_rel_err=float(rel.max(initial=0.0)),
        n_checked=int(rel.size),
        tol=float(tol),
        worst=labels[worst] if labels else "",
    )
