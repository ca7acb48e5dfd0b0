"""Drift pair (B, b), Dini moduli, and the multiplicative noise operator Q.

The singular drift b carries a modulus of continuity phi from the class of
increasing functions with phi^2 concave and int_0^1 phi(s)/s ds < infty.
All structural conditions (envelope, concavity, invertibility of QQ*,
cylindricity) are checked by sampled certificates, never symbolically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .quadrature import DyadicResult, integrate_dyadic
from .rng import substream
from .spectral import SpectralOperator, project


# ---------------------------------------------------------------------------
# Dini moduli
# ---------------------------------------------------------------------------

class ModulusError(ValueError):
    """Raised when a modulus fails validation; carries the partial-integral trace."""

    def __init__(self, message: str, report: "ModulusReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class DiniModulus:
    """Parametric modulus of continuity.

    Families:
      log_power: phi(s) = K / log^(1+delta)(c + 1/s), K > 0, delta >= 0, c >= e
      holder:    phi(s) = K s^alpha, alpha in (0, 1]
      table:     piecewise-linear interpolation of sampled (s, phi(s)) pairs
    """

    family: str
    K: float = 1.0
    delta: float = 0.5
    c: float = math.e
    alpha: float = 0.5
    table: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.family not in ("log_power", "holder", "table"):
            raise ValueError(f"unknown modulus family {self.family!r}")
        if self.family == "log_power":
            if self.K <= 0 or self.delta < 0 or self.c < math.e:
                raise ValueError("log_power requires K > 0, delta >= 0, c >= e")
        elif self.family == "holder":
            if self.K <= 0 or not 0.0 < self.alpha <= 1.0:
                raise ValueError("holder requires K > 0 and alpha in (0, 1]")
        else:
            if self.table is None or len(self.table[0]) < 2:
                raise ValueError("table modulus needs at least two (s, phi) rows")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.family == "holder":
            return self.K * np.power(s, self.alpha)
        if self.family == "log_power":
            with np.errstate(divide="ignore"):
                out = self.K / np.log(self.c + 1.0 / s) ** (1.0 + self.delta)
            return np.where(s == 0.0, 0.0, out)
        xs, ys = self.table
        return np.interp(s, xs, ys)

    def describe(self) -> dict:
        if self.family == "log_power":
            return {"family": self.family, "K": self.K, "delta": self.delta, "c": self.c}
        if self.family == "holder":
            return {"family": self.family, "K": self.K, "alpha": self.alpha}
        return {"family": self.family, "points": len(self.table[0])}


def load_modulus_table(path) -> DiniModulus:
    """Read a custom modulus from CSV with columns s, phi(s)."""
    xs: list[float] = []
    ys: list[float] = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "s":
                continue
            xs.append(float(row[0]))
            ys.append(float(row[1]))
    order = np.argsort(xs)
    return DiniModulus("table", table=(tuple(np.asarray(xs)[order]),
                                       tuple(np.asarray(ys)[order])))


@dataclass(frozen=True)
class ModulusReport:
    dini_integral: float  # math.inf when divergent
    increasing: bool
    concave_sq: bool
    convergent: bool
    accepted: bool
    partial_sums: np.ndarray
    decay_exponent: float | None


def _sample_grid() -> np.ndarray:
    geometric = 2.0 ** -np.arange(0, 41, dtype=float)
    uniform = np.linspace(0.0, 1.0, 101)
    return np.unique(np.concatenate([[0.0], geometric, uniform]))


def validate_modulus(phi: DiniModulus, levels: int = 60) -> ModulusReport:
    """Sampled class-D certificate: increasing, phi^2 concave, Dini integral finite.

    Monotonicity and concavity are checked on a geometric grid 2^-k union a
    uniform grid on [0, 1]; the Dini integral uses dyadic quadrature with
    divergence detection near zero.  Table moduli are checked on their own
    knots (between knots the square of a linear interpolant is convex by
    construction, an artifact rather than a property of the data).
    """
    if phi.family == "table":
        grid = np.unique(np.concatenate([[0.0], np.asarray(phi.table[0])]))
    else:
        grid = _sample_grid()
    vals = phi(grid)
    increasing = bool(np.all(np.diff(vals) >= -1e-12))

    sq = vals**2
    # Chord test on consecutive triples; handles the nonuniform grid.
    s0, s1, s2 = grid[:-2], grid[1:-1], grid[2:]
    chord = sq[:-2] + (sq[2:] - sq[:-2]) * (s1 - s0) / (s2 - s0)
    concave_sq = bool(np.all(sq[1:-1] >= chord - 1e-9))

    dyadic = integrate_dyadic(lambda s: float(phi(s)) / s, upper=1.0, levels=levels)
    accepted = increasing and concave_sq and dyadic.convergent
    return ModulusReport(dyadic.value, increasing, concave_sq, dyadic.convergent,
                         accepted, dyadic.partial_sums, dyadic.decay_exponent)


def require_valid_modulus(phi: DiniModulus) -> ModulusReport:
    report = validate_modulus(phi)
    if not report.accepted:
        raise ModulusError(
            f"modulus {phi.describe()} rejected: increasing={report.increasing} "
            f"concave_sq={report.concave_sq} convergent={report.convergent}",
            report,
        )
    return report


# ---------------------------------------------------------------------------
# Noise operators
# ---------------------------------------------------------------------------

def smoothstep_cutoff(r) -> np.ndarray:
    """C^2 cutoff psi: 1 on [0, 1], 0 on [2, inf), quintic smoothstep between."""
    r = np.asarray(r, dtype=float)
    x = np.clip(r - 1.0, 0.0, 1.0)
    return 1.0 - x**3 * (10.0 - 15.0 * x + 6.0 * x**2)


class NoiseOperator:
    """Diagonal multiplicative noise coefficient acting on mode ensembles.

    State arrays have shape (n, d).  Subclasses supply the diagonal and its
    directional derivatives; matrix/adjoint operations follow from
    diagonality: QQ* = diag(q^2) and Q*(QQ*)^-1 = diag(1/q).
    """

    dim: int
    is_constant = False
    is_diagonal = True
    differentiable = False
    cylindrical_level = 0  # smallest m with Q(x) = Q(proj_m x); 0 means constant

    def diag(self, t: float, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_diag(self, t: float, X: np.ndarray, direction: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_diag(self, t, X, dir1, dir2) -> np.ndarray:
        raise NotImplementedError

    # -- derived operations -------------------------------------------------

    def apply(self, t, X, V):
        return self.diag(t, X) * V

    def grad_apply(self, t, X, direction, V):
        return self.grad_diag(t, X, direction) * V

    def hess_apply(self, t, X, dir1, dir2, V):
        return self.hess_diag(t, X, dir1, dir2) * V

    def gstar_apply(self, t, X, V):
        """Apply Q*(QQ*)^-1 (the Bismut/Girsanov direction map)."""
        q = self.diag(t, X)
        if np.any(q == 0.0):
            raise SingularNoiseError("QQ* singular: zero diagonal entry")
        return V / q

    def grad_gstar_apply(self, t, X, direction, V):
        q = self.diag(t, X)
        dq = self.grad_diag(t, X, direction)
        return -dq / q**2 * V

    def qq_condition(self, t, X) -> np.ndarray:
        q2 = self.diag(t, X) ** 2
        hi = q2.max(axis=-1)
        lo = q2.min(axis=-1)
        with np.errstate(divide="ignore"):
            return np.where(lo > 0.0, hi / lo, np.inf)

    def matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.diag(self.diag(t, x[None, :])[0])

    def hs_norm(self, t, x) -> float:
        return float(np.linalg.norm(self.diag(t, x[None, :])[0]))

    def op_norm(self, t, x) -> float:
        return float(np.abs(self.diag(t, x[None, :])[0]).max())

    def gstar_norm(self, t, x) -> float:
        q = np.abs(self.diag(t, x[None, :])[0])
        if np.any(q == 0.0):
            return math.inf
        return float((1.0 / q).max())

    def min_eig_qq(self, t, x) -> float:
        return float((self.diag(t, x[None, :])[0] ** 2).min())


class SingularNoiseError(RuntimeError):
    pass


class ConstantDiagonalNoise(NoiseOperator):
    is_constant = True
    differentiable = True
    cylindrical_level = 0

    def __init__(self, q: np.ndarray):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        self.q = q
        self.dim = q.size

    def diag(self, t, X):
        return np.broadcast_to(self.q, X.shape)

    def grad_diag(self, t, X, direction):
        return np.zeros_like(X)

    def hess_diag(self, t, X, dir1, dir2):
        return np.zeros_like(X)


class TanhDiagonalNoise(NoiseOperator):
    """Q(x) = diag(q0) + eps * diag(tanh x_1, ..., tanh x_m, 0, ..., 0).

    Cylindrical at level m, twice differentiable, with QQ* uniformly
    invertible when |eps| < min q0.
    """

    is_constant = False
    differentiable = True

    def __init__(self, q0: np.ndarray, eps: float, level: int):
        q0 = np.atleast_1d(np.asarray(q0, dtype=float))
        if not 1 <= level <= q0.size:
            raise ValueError("cylindrical level must lie in [1, d]")
        if abs(eps) >= q0[:level].min():
            raise ValueError("eps too large: QQ* loses uniform invertibility")
        self.q0 = q0
        self.eps = float(eps)
        self.level = int(level)
        self.dim = q0.size
        self.cylindrical_level = int(level)

    def diag(self, t, X):
        out = np.broadcast_to(self.q0, X.shape).copy()
        m = self.level
        out[..., :m] += self.eps * np.tanh(X[..., :m])
        return out

    def grad_diag(self, t, X, direction):
        out = np.zeros_like(X)
        m = self.level
        sech2 = 1.0 / np.cosh(X[..., :m]) ** 2
        out[..., :m] = self.eps * sech2 * direction[..., :m]
        return out

    def hess_diag(self, t, X, dir1, dir2):
        out = np.zeros_like(X)
        m = self.level
        th = np.tanh(X[..., :m])
        sech2 = 1.0 / np.cosh(X[..., :m]) ** 2
        out[..., :m] = -2.0 * self.eps * sech2 * th * dir1[..., :m] * dir2[..., :m]
        return out


class InputProjectedNoise(NoiseOperator):
    """Q composed with the projection onto the first n modes: x -> Q(proj_n x)."""

    def __init__(self, base: NoiseOperator, n: int):
        self.base = base
        self.n = int(n)
        self.dim = base.dim
        self.is_constant = base.is_constant
        self.differentiable = base.differentiable
        if base.cylindrical_level == 0:
            self.cylindrical_level = 0
        else:
            self.cylindrical_level = min(base.cylindrical_level, self.n)

    def _proj(self, X):
        return project(X, self.n) if self.n < self.dim else X

    def diag(self, t, X):
        return self.base.diag(t, self._proj(X))

    def grad_diag(self, t, X, direction):
        return self.base.grad_diag(t, self._proj(X), self._proj(direction))

    def hess_diag(self, t, X, dir1, dir2):
        return self.base.hess_diag(t, self._proj(X), self._proj(dir1), self._proj(dir2))


class OutputProjectedNoise(NoiseOperator):
    """proj_n Q: noise rows beyond mode n are zeroed (Galerkin truncation)."""

    def __init__(self, base: NoiseOperator, n: int):
        self.base = base
        self.n = int(n)
        self.dim = base.dim
        self.is_constant = base.is_constant
        self.differentiable = base.differentiable
        self.cylindrical_level = base.cylindrical_level

    def _mask(self, arr):
        out = arr.copy()
        out[..., self.n:] = 0.0
        return out

    def diag(self, t, X):
        return self._mask(self.base.diag(t, X))

    def grad_diag(self, t, X, direction):
        return self._mask(self.base.grad_diag(t, X, direction))

    def hess_diag(self, t, X, dir1, dir2):
        return self._mask(self.base.hess_diag(t, X, dir1, dir2))


class CutoffNoise(NoiseOperator):
    """Radial truncation Q(psi(|z|/m) z), with |proj z| in the cylindrical case."""

    def __init__(self, base: NoiseOperator, m: float):
        if m <= 0:
            raise ValueError("truncation level must be positive")
        self.base = base
        self.m = float(m)
        self.dim = base.dim
        self.is_constant = base.is_constant
        self.cylindrical_level = base.cylindrical_level
        self.differentiable = False  # cutoff derivatives are not needed downstream

    def diag(self, t, X):
        level = self.base.cylindrical_level
        if level >= 1:
            radius = np.linalg.norm(X[..., :level], axis=-1)
        else:
            radius = np.linalg.norm(X, axis=-1)
        scale = smoothstep_cutoff(radius / self.m)
        return self.base.diag(t, scale[..., None] * X)


# ---------------------------------------------------------------------------
# Coefficient sets
# ---------------------------------------------------------------------------

DriftFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GrowthPair:
    """One-sided growth data: <(B+b)(x+y), x> <= Phi(t, |x|^2) + h(t, |y|)."""

    Phi: Callable[[float, np.ndarray], np.ndarray]
    h: Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientSet:
    op: SpectralOperator
    noise: NoiseOperator
    regular_drift: DriftFn | None = None
    singular_drift: DriftFn | None = None
    modulus: DiniModulus | None = None
    singular_bound: float = 0.0
    regular_lipschitz: float = 0.0
    growth: GrowthPair | None = None
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise.dim != self.op.dim:
            raise ValueError("noise dimension does not match operator dimension")
        if self.singular_drift is not None and self.modulus is None:
            raise ValueError("singular drift requires an attached modulus")

    @property
    def dim(self) -> int:
        return self.op.dim

    def B(self, t: float, X: np.ndarray) -> np.ndarray:
        if self.regular_drift is None:
            return np.zeros_like(X)
        return self.regular_drift(t, X)

    def b(self, t: float, X: np.ndarray) -> np.ndarray:
        if self.singular_drift is None:
            return np.zeros_like(X)
        return self.singular_drift(t, X)

    def total_drift(self, t: float, X: np.ndarray) -> np.ndarray:
        return self.B(t, X) + self.b(t, X)

    @property
    def has_regular_drift(self) -> bool:
        return self.regular_drift is not None

    @property
    def has_singular_drift(self) -> bool:
        return self.singular_drift is not None


def _unit_mode_drift(phi: DiniModulus, locality: int) -> DriftFn:
    # phi composed with the 1-Lipschitz map x -> min(|proj x|, 1) stays inside
    # the phi-envelope because class-D moduli are subadditive.
    def b(t, X):
        r = np.minimum(np.linalg.norm(X[..., :locality], axis=-1), 1.0)
        out = np.zeros_like(X)
        out[..., 0] = phi(r)
        return out

    return b


BUILTIN_NAMES = ("zero", "dini", "holder", "dini_mult", "dissipative")


def builtin_coefficients(name: str, op: SpectralOperator, **overrides) -> CoefficientSet:
    """Library of ready-made coefficient sets used across the experiments.

    zero         B = b = 0, Q = I (Gaussian reference)
    dini         log-power Dini drift along e_1, Q = I
    holder       Holder(1/2) drift along e_1, Q = I
    dini_mult    Dini drift with Q = I + eps diag(tanh of the first m modes)
    dissipative  B(x) = -x with declared one-sided growth data, Q = I
    """
    d = op.dim
    locality = int(overrides.pop("locality", min(2, d)))
    eye = ConstantDiagonalNoise(np.ones(d))

    if name == "zero":
        return CoefficientSet(op, eye, name="zero")

    if name == "dini":
        phi = DiniModulus("log_power",
                          K=overrides.pop("K", 1.5),
                          delta=overrides.pop("delta", 0.5),
                          c=overrides.pop("c", 8.0))
        return CoefficientSet(op, eye, singular_drift=_unit_mode_drift(phi, locality),
                              modulus=phi, singular_bound=float(phi(1.0)),
                              name="dini", meta={"locality": locality})

    if name == "holder":
        phi = DiniModulus("holder", K=overrides.pop("K", 0.75),
                          alpha=overrides.pop("alpha", 0.5))
        return CoefficientSet(op, eye, singular_drift=_unit_mode_drift(phi, locality),
                              modulus=phi, singular_bound=float(phi(1.0)),
                              name="holder", meta={"locality": locality})

    if name == "dini_mult":
        phi = DiniModulus("log_power",
                          K=overrides.pop("K", 1.5),
                          delta=overrides.pop("delta", 0.5),
                          c=overrides.pop("c", 8.0))
        eps = overrides.pop("eps_q", 0.2)
        m = int(overrides.pop("noise_level", min(2, d)))
        noise = TanhDiagonalNoise(np.ones(d), eps, m)
        _check_noise_floor(noise, np.ones(d))
        return CoefficientSet(op, noise, singular_drift=_unit_mode_drift(phi, locality),
                              modulus=phi, singular_bound=float(phi(1.0)),
                              name="dini_mult", meta={"locality": locality,
                                                      "eps_q": eps, "noise_level": m})

    if name == "dissipative":
        growth = GrowthPair(Phi=lambda t, r: 1.0 + r,
                            h=lambda t, r: 1.0 + r**2 / 4.0)
        return CoefficientSet(op, eye, regular_drift=lambda t, X: -X,
                              regular_lipschitz=1.0, growth=growth,
                              name="dissipative")

    raise ValueError(f"unknown builtin coefficient set {name!r}; "
                     f"choose one of {BUILTIN_NAMES}")


def _check_noise_floor(noise: NoiseOperator, q0: np.ndarray, n_samples: int = 64):
    # Admissibility rule for the perturbation size: the sampled smallest
    # eigenvalue of QQ* must keep at least half the unperturbed floor.
    rng = substream(20210, "noise-floor")
    floor0 = float((q0**2).min())
    X = rng.normal(scale=3.0, size=(n_samples, noise.dim))
    q = noise.diag(0.0, X)
    if float((q**2).min()) < 0.5 * floor0:
        raise ValueError("noise perturbation too large: sampled min eig of QQ* "
                         "dropped below half the constant-part floor")


# ---------------------------------------------------------------------------
# Sampled certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvelopeReport:
    max_violation: float
    n_samples: int
    worst_pair: tuple[np.ndarray, np.ndarray] | None


def modulus_envelope_check(cs: CoefficientSet, T: float, n_samples: int,
                           seed: int) -> EnvelopeReport:
    """max over sampled (t, x, y) of |b_t(x) - b_t(y)| - phi(|x - y|).

    Nonpositive values certify the Dini envelope on the sample.
    """
    if cs.modulus is None:
        raise ValueError("coefficient set declares no modulus")
    rng = substream(seed, "envelope", cs.name)
    d = cs.dim
    worst = -math.inf
    worst_pair = None
    # Mix of pair separations, stressing the small-gap regime.
    for scale in (1e-4, 1e-2, 0.1, 1.0, 4.0):
        n = max(1, n_samples // 5)
        t = rng.uniform(0.0, T, size=n)
        x = rng.normal(scale=2.0, size=(n, d))
        y = x + rng.normal(scale=scale, size=(n, d))
        gaps = np.linalg.norm(x - y, axis=1)
        for i in range(n):
            bx = cs.b(t[i], x[i][None, :])[0]
            by = cs.b(t[i], y[i][None, :])[0]
            v = float(np.linalg.norm(bx - by) - cs.modulus(gaps[i]))
            if v > worst:
                worst, worst_pair = v, (x[i], y[i])
    return EnvelopeReport(worst, n_samples, worst_pair)


def cylindrical_defect(cs: CoefficientSet, s: float, x: np.ndarray, n: int) -> float:
    """||Q_s(x) - Q_s(proj_n x)||_HS computed entrywise."""
    x = np.asarray(x, dtype=float)
    if not 1 <= n <= cs.dim:
        raise ValueError(f"projection level must lie in [1, {cs.dim}]")
    full = cs.noise.matrix(s, x)
    proj = cs.noise.matrix(s, project(x, n))
    return float(np.linalg.norm(full - proj))


def truncate_coefficients(cs: CoefficientSet, m: float) -> CoefficientSet:
    """Cutoff truncation: b_t(z) -> b_(t^m)(z) psi(|z|/m), Q -> Q(psi(.) z).

    Coincides with the original pair for t <= m and |z| <= m; the singular
    drift vanishes for |z| >= 2m.
    """
    if m <= 0:
        raise ValueError("truncation level must be positive")
    base_b = cs.singular_drift
    base_B = cs.regular_drift

    def b_m(t, X):
        if base_b is None:
            return np.zeros_like(X)
        scale = smoothstep_cutoff(np.linalg.norm(X, axis=-1) / m)
        return base_b(min(t, m), X) * scale[..., None]

    return CoefficientSet(cs.op, CutoffNoise(cs.noise, m),
                          regular_drift=base_B,
                          singular_drift=b_m if base_b is not None else None,
                          modulus=cs.modulus, singular_bound=cs.singular_bound,
                          regular_lipschitz=cs.regular_lipschitz, growth=cs.growth,
                          name=f"{cs.name}[{m:g}]", meta=dict(cs.meta))


@dataclass(frozen=True)
class GrowthReport:
    max_violation: float
    n_samples: int


def one_sided_growth_check(cs: CoefficientSet, T: float, n_samples: int,
                           seed: int) -> GrowthReport:
    """max over samples of <(B+b)(t, x+y), x> - Phi_t(|x|^2) - h_t(|y|)."""
    if cs.growth is None:
        raise ValueError("one-sided growth data (Phi, h) not declared")
    rng = substream(seed, "growth", cs.name)
    d = cs.dim
    worst = -math.inf
    for scale in (0.5, 2.0, 8.0):
        n = max(1, n_samples // 3)
        t = rng.uniform(0.0, T, size=n)
        x = rng.normal(scale=scale, size=(n, d))
        y = rng.normal(scale=scale, size=(n, d))
        for i in range(n):
            drift = cs.total_drift(t[i], (x[i] + y[i])[None, :])[0]
            lhs = float(drift @ x[i])
            bound = float(cs.growth.Phi(t[i], np.dot(x[i], x[i]))
                          + cs.growth.h(t[i], np.linalg.norm(y[i])))
            worst = max(worst, lhs - bound)
    return GrowthReport(worst, n_samples)
