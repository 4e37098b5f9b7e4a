"""Numerical checks of the kernel view of the positional encoding.

Three facts are verified here:

* The PE inner product ``psi(x1) . psi(x2)`` equals ``sum_j cos(2pi w_j . (x1 - x2))``,
  so it depends on the offset only.
* Random Fourier features converge to a shift-invariant target kernel at the
  Monte-Carlo rate ``1/sqrt(L)``.
* The empirical NTK of an MLP fed with normalised encodings becomes a function
  of the offset alone as the width grows.

Spectral scale for the Gaussian kernel
--------------------------------------
Features use the phase ``2pi w . x``. For ``w ~ N(0, s^2 I_d)`` the
characteristic function gives ``E[cos(2pi w . delta)] = exp(-2 pi^2 s^2 |delta|^2)``.
Matching ``exp(-|delta|^2 / (2 sigma^2))`` requires ``s = 1 / (2 pi sigma)``.
The unbiasedness check below confirms this numerically, and a deliberately
wrong scale fails it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter, Tape, Tensor, ops
from .iar import PositionalEncoder, encode_standardized

CURVE_HEADER = ["L", "err_median", "err_max", "reps"]


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    sigma: float = 0.5
    dim: int = 2

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}; only 'gaussian' is available")
        if not self.sigma > 0:
            raise ValueError(f"bandwidth must be positive, got {self.sigma}")
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")

    @property
    def spectral_std(self) -> float:
        """Per-axis std of the frequency distribution under the ``2pi`` phase convention."""
        return 1.0 / (2.0 * np.pi * self.sigma)

    def __call__(self, delta) -> np.ndarray:
        delta = np.asarray(delta, dtype=np.float64)
        return np.exp(-np.sum(delta**2, axis=-1) / (2.0 * self.sigma**2))


@dataclass
class RFFBank:
    freqs: np.ndarray  # [L, d]

    @property
    def L(self) -> int:
        return self.freqs.shape[0]

    def features(self, x) -> np.ndarray:
        """``[2L, P]`` sin rows then cos rows for ``[P, d]`` points."""
        proj = 2.0 * np.pi * self.freqs @ np.asarray(x, dtype=np.float64).T
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=0)

    def estimate(self, x1, x2) -> np.ndarray:
        """``(1/L) psi(x1) . psi(x2)`` for each row pair."""
        return np.sum(self.features(x1) * self.features(x2), axis=0) / self.L


def sample_rff(spec: KernelSpec, L: int, rng: np.random.Generator, spectral_std: float | None = None) -> RFFBank:
    """Draw ``L`` i.i.d. frequencies from the kernel's spectral distribution.

    ``spectral_std`` overrides the derived scale; it exists for negative controls.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    s = spec.spectral_std if spectral_std is None else spectral_std
    return RFFBank(rng.normal(0.0, s, (L, spec.dim)))


# ----------------------------------------------------------------------
# PE kernel identity
# ----------------------------------------------------------------------


def _as_points(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _encoder64(pe: PositionalEncoder) -> PositionalEncoder:
    if pe.freqs.dtype == np.float64:
        return pe
    clone = PositionalEncoder.__new__(PositionalEncoder)
    clone.freqs = Parameter(pe.freqs.data, pe.freqs.name, np.float64)
    return clone


def pe_features(pe: PositionalEncoder, x) -> np.ndarray:
    """``[2L, P]`` encodings of ``[P, 2]`` standardized points, evaluated in f64."""
    return encode_standardized(_encoder64(pe), _as_points(x).T).data


def pe_kernel(pe: PositionalEncoder, x1, x2) -> np.ndarray:
    """Dot-product form ``psi(x1) . psi(x2)``, one value per row pair."""
    return np.sum(pe_features(pe, x1) * pe_features(pe, x2), axis=0)


def pe_kernel_cosine(pe: PositionalEncoder, x1, x2) -> np.ndarray:
    """Cosine-sum form ``sum_j cos(2pi w_j . (x1 - x2))``."""
    w = pe.freqs.data.astype(np.float64)
    delta = _as_points(x1) - _as_points(x2)
    return np.cos(2.0 * np.pi * delta @ w.T).sum(axis=1)


# ----------------------------------------------------------------------
# RFF convergence
# ----------------------------------------------------------------------


@dataclass
class ErrorCurve:
    L: list[int]
    errors: np.ndarray  # [reps, len(L)] sup-errors

    @property
    def reps(self) -> int:
        return self.errors.shape[0]

    @property
    def median(self) -> np.ndarray:
        return np.median(self.errors, axis=0) if self.errors.size else np.zeros(0)

    @property
    def max(self) -> np.ndarray:
        return self.errors.max(axis=0) if self.errors.size else np.zeros(0)

    def rows(self) -> list[tuple[int, float, float, int]]:
        if not self.errors.size:
            return []
        return [(L, float(m), float(x), self.reps) for L, m, x in zip(self.L, self.median, self.max)]

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.median) < 0))

    @property
    def sqrt_ratio(self) -> float:
        """``max / min`` of ``err_median * sqrt(L)`` across the sweep (1 = exact rate)."""
        scaled = self.median * np.sqrt(np.asarray(self.L, dtype=np.float64))
        return float(scaled.max() / scaled.min())


def rff_error_curve(
    spec: KernelSpec, L_list, n_pairs: int, rng: np.random.Generator, reps: int = 20, spectral_std: float | None = None
) -> ErrorCurve:
    """Sup-error of the RFF estimate over ``n_pairs`` random pairs in ``[-1, 1]^d``.

    Each repetition draws fresh pairs and a fresh bank for every ``L``.
    """
    L_list = [int(L) for L in L_list]
    if any(b <= a for a, b in zip(L_list, L_list[1:])):
        raise ValueError(f"L_list must be strictly ascending, got {L_list}")
    if n_pairs == 0:
        return ErrorCurve(L_list, np.zeros((0, len(L_list))))
    errors = np.empty((reps, len(L_list)))
    for r in range(reps):
        x1 = rng.uniform(-1.0, 1.0, (n_pairs, spec.dim))
        x2 = rng.uniform(-1.0, 1.0, (n_pairs, spec.dim))
        target = spec(x1 - x2)
        for j, L in enumerate(L_list):
            bank = sample_rff(spec, L, rng, spectral_std)
            errors[r, j] = np.abs(bank.estimate(x1, x2) - target).max()
    return ErrorCurve(L_list, errors)


@dataclass
class UnbiasednessReport:
    mean: float
    std_err: float
    target: float
    n_banks: int

    @property
    def z(self) -> float:
        return (self.mean - self.target) / self.std_err if self.std_err > 0 else float("inf")

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0


def unbiasedness(
    spec: KernelSpec,
    x1,
    x2,
    rng: np.random.Generator,
    n_banks: int = 10_000,
    L: int = 16,
    spectral_std: float | None = None,
) -> UnbiasednessReport:
    """Mean of ``n_banks`` independent RFF estimates at one pair against the closed form."""
    x1, x2 = _as_points(x1), _as_points(x2)
    s = spec.spectral_std if spectral_std is None else spectral_std
    freqs = rng.normal(0.0, s, (n_banks, L, spec.dim))
    delta = (x1 - x2)[0]
    est = np.cos(2.0 * np.pi * freqs @ delta).mean(axis=1)
    return UnbiasednessReport(float(est.mean()), float(est.std(ddof=1) / np.sqrt(n_banks)), float(spec(delta)), n_banks)


def write_curve_csv(path, curve: ErrorCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for L, med, mx, reps in curve.rows():
            writer.writerow([L, f"{med:.8g}", f"{mx:.8g}", reps])


# ----------------------------------------------------------------------
# empirical NTK
# ----------------------------------------------------------------------


def ntk_init(width: int, depth: int, in_dim: int, rng: np.random.Generator) -> list[Parameter]:
    """Standard-normal weights for an NTK-parameterised ReLU MLP with scalar output."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    dims = [in_dim] + [width] * depth + [1]
    return [Parameter(rng.standard_normal((dims[i + 1], dims[i])), f"ntk.{i}", np.float64) for i in range(len(dims) - 1)]


def ntk_forward(params: list[Parameter], x: Tensor) -> Tensor:
    """``W_l h / sqrt(fan_in)`` with ReLU between layers; ``x`` is ``[D, P]``."""
    h = x
    for i, W in enumerate(params):
        h = ops.mul(ops.matmul(W, h), 1.0 / np.sqrt(W.shape[1]))
        if i < len(params) - 1:
            h = ops.relu(h)
    return h


def param_gradient(params: list[Parameter], x) -> np.ndarray:
    """Flattened gradient of the scalar output at one input vector."""
    with Tape() as tape:
        out = ops.sum(ntk_forward(params, Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 1))))
    tape.backward(out, params)
    grads = np.concatenate([p.grad.ravel() for p in params])
    for p in params:
        p.grad = None
    return grads


def ntk_samples(width: int, depth: int, x1, x2, n_inits: int, rng: np.random.Generator) -> np.ndarray:
    """Per-initialisation values of ``<d f(x1)/d theta, d f(x2)/d theta>``."""
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    out = np.empty(n_inits)
    for i in range(n_inits):
        params = ntk_init(width, depth, x1.size, rng)
        out[i] = param_gradient(params, x1) @ param_gradient(params, x2)
    return out


def empirical_ntk(width: int, depth: int, x1, x2, n_inits: int, rng: np.random.Generator) -> float:
    return float(ntk_samples(width, depth, x1, x2, n_inits, rng).mean())


def _ntk_pairs(width: int, depth: int, X1: np.ndarray, X2: np.ndarray, n_inits: int, rng) -> np.ndarray:
    """``[n_inits, P]`` NTK values; every pair sees the same initialisations."""
    values = np.empty((n_inits, len(X1)))
    for i in range(n_inits):
        params = ntk_init(width, depth, X1.shape[1], rng)
        for p, (a, b) in enumerate(zip(X1, X2)):
            values[i, p] = param_gradient(params, a) @ param_gradient(params, b)
    return values


def normalized_encoding(pe: PositionalEncoder, x) -> np.ndarray:
    """``[P, 2L]`` rows ``psi(x) / sqrt(L)``, which have unit norm."""
    return pe_features(pe, x).T / np.sqrt(pe.n_freq)


@dataclass
class ShiftReport:
    widths: list[int]
    spread: np.ndarray  # median relative deviation from the group median, per width
    cv: np.ndarray  # coefficient of variation across pairs, per width
    delta: np.ndarray
    kappa_pe: float
    values: dict = field(default_factory=dict)  # width -> [n_inits, n_pairs]

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.spread) < 0))

    def summary(self) -> str:
        lines = [f"delta = ({self.delta[0]:+.4f}, {self.delta[1]:+.4f}), kappa_pe = {self.kappa_pe:.6f}"]
        for w, s, c in zip(self.widths, self.spread, self.cv):
            lines.append(f"width {w:5d}: median spread {s:.5f}  cv {c:.5f}")
        lines.append(f"spread decreasing in width: {'yes' if self.monotone else 'no'}")
        return "\n".join(lines)


def shift_invariance_deviation(
    pe: PositionalEncoder,
    widths,
    rng: np.random.Generator,
    n_pairs: int = 50,
    n_inits: int = 32,
    depth: int = 2,
    delta=None,
) -> ShiftReport:
    """Spread of the PE -> MLP NTK over pairs that share one offset ``delta``.

    All pairs share ``psi(x1) . psi(x2)``, so the infinite-width NTK gives them
    one common value; any spread is finite-width fluctuation.
    """
    widths = [int(w) for w in widths]
    if delta is None:
        delta = rng.uniform(-0.5, 0.5, 2)
    delta = np.asarray(delta, dtype=np.float64)
    lo = np.maximum(-1.0, -1.0 - delta)
    hi = np.minimum(1.0, 1.0 - delta)
    if np.any(hi < lo):
        raise ValueError(f"offset {delta} leaves no room inside [-1, 1]^2")
    x1 = rng.uniform(lo, hi, (n_pairs, 2))
    x2 = x1 + delta
    X1, X2 = normalized_encoding(pe, x1), normalized_encoding(pe, x2)
    kappa = pe_kernel_cosine(pe, x1[:1], x2[:1])[0]
    spread, cv, values = [], [], {}
    for w in widths:
        vals = _ntk_pairs(w, depth, X1, X2, n_inits, rng)
        values[w] = vals
        per_pair = vals.mean(axis=0)
        centre = np.median(per_pair)
        spread.append(float(np.median(np.abs(per_pair - centre)) / abs(centre)))
        cv.append(float(per_pair.std() / abs(per_pair.mean())))
    return ShiftReport(widths, np.array(spread), np.array(cv), delta, float(kappa), values)
