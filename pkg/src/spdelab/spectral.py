"""Eigenbasis representation of the negative definite operator A.

Everything acts diagonally: the operator is identified with its eigenvalue
sequence 0 < lam_1 <= ... <= lam_d, mode vectors are coefficient arrays in
the eigenbasis, and the semigroup e^{tA} multiplies mode n by e^{-lam_n t}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SpectralOperator:
    """Mode truncation of -A with eigenvalues lam_1 <= ... <= lam_d.

    ``growth`` optionally declares the law lam_n = c * n**p behind the
    eigenvalues, which enables integral-test tail estimates.
    ``trace_exponent`` is the eps in the trace diagnostic
    sum_n lam_n^-(1-eps).
    """

    eigenvalues: np.ndarray
    trace_exponent: float = 0.4
    growth: tuple[float, float] | None = None  # (c, p)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("eigenvalues must be a nonempty 1-d sequence")
        if np.any(lam <= 0.0):
            raise ValueError("eigenvalues must be strictly positive")
        if np.any(np.diff(lam) < 0.0):
            raise ValueError("eigenvalues must be nondecreasing")
        if not 0.0 < self.trace_exponent < 1.0:
            raise ValueError("trace_exponent must lie in (0, 1)")
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)


def dirichlet_laplacian(dim: int, trace_exponent: float = 0.4) -> SpectralOperator:
    """Default operator: Dirichlet Laplacian on an interval, lam_n = (n pi)^2."""
    n = np.arange(1, dim + 1, dtype=float)
    return SpectralOperator((n * math.pi) ** 2, trace_exponent, growth=(math.pi**2, 2.0))


def from_growth_law(dim: int, coefficient: float, exponent: float,
                    trace_exponent: float = 0.4) -> SpectralOperator:
    if coefficient <= 0 or exponent <= 0:
        raise ValueError("growth law requires positive coefficient and exponent")
    n = np.arange(1, dim + 1, dtype=float)
    lam = coefficient * n**exponent
    return SpectralOperator(lam, trace_exponent, growth=(coefficient, exponent))


def semigroup_apply(op: SpectralOperator, t: float, x: np.ndarray) -> np.ndarray:
    """Apply e^{tA}: mode n is scaled by e^{-lam_n t}.  Requires t >= 0."""
    if t < 0.0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.dim:
        raise ValueError("mode vector length does not match operator dimension")
    return np.exp(-op.eigenvalues * t) * x


def project(x: np.ndarray, n: int) -> np.ndarray:
    """Orthogonal projection onto the first n modes (coordinates > n zeroed)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    if not 1 <= n <= d:
        raise ValueError(f"projection level must satisfy 1 <= n <= {d}, got {n}")
    out = x.copy()
    out[..., n:] = 0.0
    return out


@dataclass(frozen=True)
class TraceDiagnostic:
    partial_sum: float
    tail_estimate: float | None  # None when no growth law is declared
    convergent: bool | None

    summary: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "summary", {
            "partial_sum": self.partial_sum,
            "tail_estimate": self.tail_estimate,
            "convergent": self.convergent,
        })


def trace_diagnostic(op: SpectralOperator) -> TraceDiagnostic:
    """Trace-class diagnostic sum_n lam_n^-(1-eps) with integral-test tail.

    With a declared law lam_n = c n^p the series behaves like n^-p(1-eps),
    so it converges iff p (1-eps) > 1; the tail is bounded by
    int_d^inf (c x^p)^-(1-eps) dx.
    """
    eps = op.trace_exponent
    partial = float(np.sum(op.eigenvalues ** (eps - 1.0)))
    if op.growth is None:
        return TraceDiagnostic(partial, None, None)
    c, p = op.growth
    q = p * (1.0 - eps)
    if q > 1.0:
        d = op.dim
        tail = c ** (eps - 1.0) * d ** (1.0 - q) / (q - 1.0)
        return TraceDiagnostic(partial, float(tail), True)
    return TraceDiagnostic(partial, math.inf, False)


def semigroup_hs_integral(op: SpectralOperator, t: float) -> float:
    """int_0^t ||e^{sA}||_HS^2 ds = sum_n (1 - e^{-2 lam_n t}) / (2 lam_n).

    Feeds the stochastic-convolution variance checks.  Requires t > 0.
    """
    if t <= 0.0:
        raise ValueError(f"integration time must be positive, got {t}")
    lam = op.eigenvalues
    return float(np.sum(-np.expm1(-2.0 * lam * t) / (2.0 * lam)))
