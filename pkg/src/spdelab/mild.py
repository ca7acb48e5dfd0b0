"""Simulation of the full semilinear equation and the transformed equation.

The integrator is exponential Euler with the exact per-mode drift factor
(1 - e^{-lam dt}) / lam (the integral of the semigroup over one step), the
left-point evaluation of drift and noise, and the semigroup factor applied
to the noise increment:

    X' = e^{-lam dt} X + (1 - e^{-lam dt})/lam (B+b)(X) + e^{-lam dt} Q(X) dW.

Explosion is declared when |X| crosses 1e8; exploded paths freeze at their
crossing state and record the exit time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .coefficients import CoefficientSet, OutputProjectedNoise
from .regularization import UGrid, theta_apply, theta_invert
from .rng import substream
from .spectral import project

BLOWUP_THRESHOLD = 1e8

_trapz = getattr(np, "trapezoid", np.trapz)


@dataclass
class SolutionPath:
    """Ensemble trajectory with explosion bookkeeping.

    states has shape (R, n, d) where R indexes record_times; increments are
    stored only for record="full" runs (needed for pathwise replay and the
    representation residual).
    """

    times: np.ndarray
    record_times: np.ndarray
    states: np.ndarray
    increments: np.ndarray | None
    exploded: np.ndarray
    exit_times: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def explosion_count(self) -> int:
        return int(self.exploded.sum())


def _grid(T: float, dt: float) -> np.ndarray:
    if dt <= 0.0:
        raise ValueError("time step must be positive")
    n = int(round(T / dt))
    if n == 0 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"step {dt} does not divide the horizon {T}")
    return dt * np.arange(n + 1)


def _record_set(times: np.ndarray, record) -> list[int]:
    if isinstance(record, str):
        if record == "full":
            return list(range(len(times)))
        if record == "final":
            return [len(times) - 1]
        raise ValueError(f"unknown record mode {record!r}")
    wanted = np.atleast_1d(np.asarray(record, dtype=float))
    idx = []
    for t in wanted:
        k = int(round(t / (times[1] - times[0])))
        if not (0 <= k < len(times)) or abs(times[k] - t) > 1e-9:
            raise ValueError(f"record time {t} does not lie on the grid")
        idx.append(k)
    return idx


def _mild_factors(cs: CoefficientSet, dt: float):
    lam = cs.op.eigenvalues
    fac = np.exp(-lam * dt)
    drift_fac = -np.expm1(-lam * dt) / lam
    return fac, drift_fac


def _mild_step(cs: CoefficientSet, t0: float, fac, drift_fac, X, dW):
    return (fac * X + drift_fac * cs.total_drift(t0, X)
            + fac * cs.noise.apply(t0, X, dW))


def _advance(X, X_candidate, alive, exploded, exit_times, t1):
    bad = ~np.isfinite(X_candidate).all(axis=1) & alive
    if np.any(bad):
        raise RuntimeError(f"NaN state at t = {t1:.6g} on {int(bad.sum())} paths; "
                           "reduce the step or check the coefficients")
    X_next = np.where(alive[:, None], X_candidate, X)
    crossing = alive & (np.linalg.norm(X_next, axis=1) >= BLOWUP_THRESHOLD)
    if np.any(crossing):
        exploded[crossing] = True
        exit_times[crossing] = t1
        alive = alive & ~crossing
    return X_next, alive


def simulate_mild(cs: CoefficientSet, x0, T: float, dt: float, n_paths: int,
                  seed: int, record="full") -> SolutionPath:
    """Exponential-Euler ensemble of the full equation on [0, T].

    record: "full" (every node plus increments), "final", or a list of grid
    times.  Increment draws depend only on (seed, step), never on the
    coefficients, so runs with equal seeds are coupled by construction.
    """
    times = _grid(T, dt)
    d = cs.dim
    x0 = np.asarray(x0, dtype=float)
    X = np.broadcast_to(x0, (n_paths, d)).copy() if x0.ndim == 1 else x0.copy()
    rec = _record_set(times, record)
    rec_states = np.empty((len(rec), n_paths, d))
    full = isinstance(record, str) and record == "full"
    incs = np.empty((len(times) - 1, n_paths, d)) if full else None

    alive = np.ones(n_paths, dtype=bool)
    exploded = np.zeros(n_paths, dtype=bool)
    exit_times = np.full(n_paths, np.nan)
    rng = substream(seed, "mild")
    fac, drift_fac = _mild_factors(cs, dt)
    pos = 0
    if rec and rec[0] == 0:
        rec_states[0] = X
        pos = 1
    for k in range(len(times) - 1):
        dW = rng.normal(0.0, math.sqrt(dt), size=(n_paths, d))
        if incs is not None:
            incs[k] = dW
        cand = _mild_step(cs, float(times[k]), fac, drift_fac, X, dW)
        X, alive = _advance(X, cand, alive, exploded, exit_times, float(times[k + 1]))
        if pos < len(rec) and rec[pos] == k + 1:
            rec_states[pos] = X
            pos += 1
    return SolutionPath(times, times[rec], rec_states, incs, exploded, exit_times)


def path_reconstruction_defect(cs: CoefficientSet, path: SolutionPath) -> float:
    """Replay stored steps; 0.0 bitwise for an untampered full-record path."""
    if path.increments is None:
        raise ValueError("reconstruction needs a full-record path")
    dt = float(path.times[1] - path.times[0])
    fac, drift_fac = _mild_factors(cs, dt)
    worst = 0.0
    for k in range(len(path.times) - 1):
        cand = _mild_step(cs, float(path.times[k]), fac, drift_fac,
                          path.states[k], path.increments[k])
        worst = max(worst, float(np.abs(cand - path.states[k + 1]).max()))
    return worst


# ---------------------------------------------------------------------------
# Pathwise uniqueness experiment
# ---------------------------------------------------------------------------

@dataclass
class GapReport:
    median_sup_gap: float
    mean_sup_gap: float
    max_sup_gap: float
    quantiles: dict
    bitwise_equal: bool
    n_paths: int


def pathwise_uniqueness_experiment(cs: CoefficientSet, x0, y0, T: float,
                                   dt: float, n_paths: int,
                                   seed: int) -> GapReport:
    """Couple two starts through the identical increment stream and report
    the distribution of sup_t |X_t - Y_t|."""
    times = _grid(T, dt)
    d = cs.dim
    X = np.broadcast_to(np.asarray(x0, float), (n_paths, d)).copy()
    Y = np.broadcast_to(np.asarray(y0, float), (n_paths, d)).copy()
    rng = substream(seed, "mild")
    fac, drift_fac = _mild_factors(cs, dt)
    sup_gap = np.linalg.norm(X - Y, axis=1)
    identical = bool(np.array_equal(X, Y))
    for k in range(len(times) - 1):
        dW = rng.normal(0.0, math.sqrt(dt), size=(n_paths, d))
        X = _mild_step(cs, float(times[k]), fac, drift_fac, X, dW)
        Y = _mild_step(cs, float(times[k]), fac, drift_fac, Y, dW)
        np.maximum(sup_gap, np.linalg.norm(X - Y, axis=1), out=sup_gap)
        if identical:
            identical = bool(np.array_equal(X, Y))
    qs = {q: float(np.quantile(sup_gap, q)) for q in (0.1, 0.5, 0.9)}
    return GapReport(float(np.median(sup_gap)), float(sup_gap.mean()),
                     float(sup_gap.max()), qs, identical, n_paths)


# ---------------------------------------------------------------------------
# Regularization representation residual
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    max_residual: float
    per_time: np.ndarray


def representation_residual(cs: CoefficientSet, u: UGrid, lam: float,
                            path: SolutionPath) -> ResidualReport:
    """Pathwise defect of the regularization identity along a stored path.

    Right side: e^{tA}(X_0 + u_0(X_0)) - u_t(X_t)
      + int_0^t [(lam - A) e^{(t-s)A} u_s + e^{(t-s)A}(B_s + grad_{B_s} u_s)](X_s) ds
      + Ito sum of e^{(t-s)A} {Q + (grad u) Q}(X_s) dW_s,
    with the (lam - A) factor evaluated per mode as (lam + lam_n) e^{-lam_n (t-s)}
    and the stored increments reused.  Returns the max norm gap per grid time.
    """
    if path.increments is None:
        raise ValueError("representation residual needs a full-record path")
    if len(path.record_times) != len(path.times):
        raise ValueError("representation residual needs every grid node recorded")
    if path.times[-1] > u.T + 1e-9:
        raise ValueError("path horizon exceeds the u grid horizon")
    lam_n = cs.op.eigenvalues
    dt = float(path.times[1] - path.times[0])
    fac = np.exp(-lam_n * dt)
    n = path.states.shape[1]
    X0 = path.states[0]
    base = X0 + u.evaluate(0.0, X0)

    D = np.zeros((n, cs.dim))
    M = np.zeros((n, cs.dim))
    K = len(path.times)
    per_time = np.empty(K)
    for k in range(K):
        t_k = float(path.times[k])
        X_k = path.states[k]
        u_k = u.evaluate(t_k, X_k)
        rhs = np.exp(-lam_n * t_k) * base - u_k + D + M
        per_time[k] = float(np.linalg.norm(X_k - rhs, axis=1).max())
        if k == K - 1:
            break
        B_k = cs.B(t_k, X_k)
        g = (lam + lam_n) * u_k + B_k + u.directional(t_k, X_k, B_k)
        D = fac * (D + dt * g)
        QdW = cs.noise.apply(t_k, X_k, path.increments[k])
        M = fac * (M + QdW + u.directional(t_k, X_k, QdW))
    return ResidualReport(float(per_time.max()), per_time)


# ---------------------------------------------------------------------------
# Transformed equation
# ---------------------------------------------------------------------------

def _transformed_step(cs: CoefficientSet, u: UGrid, lam: float, t0: float,
                      fac, drift_fac, Xbar, dW, level: int | None = None):
    """One step of the image equation for theta(X).

    Drift {B + grad_B u + (lam - A) u} o theta^{-1}, noise {Q + (grad u) Q}
    o theta^{-1}; an optional Galerkin level projects drift, noise and state
    onto the first `level` modes.
    """
    x = theta_invert(u, t0, Xbar)
    B = cs.B(t0, x)
    u_val = u.evaluate(t0, x)
    drift = B + u.directional(t0, x, B) + (lam + cs.op.eigenvalues) * u_val
    QdW = cs.noise.apply(t0, x, dW)
    noise_term = QdW + u.directional(t0, x, QdW)
    if level is not None:
        drift = project(drift, level)
        noise_term = project(noise_term, level)
    return fac * Xbar + drift_fac * drift + fac * noise_term


def simulate_transformed(cs: CoefficientSet, u: UGrid, lam: float, x0,
                         T: float, dt: float, n_paths: int, seed: int,
                         record="full", level: int | None = None) -> SolutionPath:
    """Ensemble of the transformed equation started at theta_0(x0)."""
    times = _grid(T, dt)
    d = cs.dim
    x0 = np.asarray(x0, dtype=float)
    start = theta_apply(u, 0.0, x0)
    if level is not None:
        start = project(start, level)
    X = np.broadcast_to(start, (n_paths, d)).copy()
    rec = _record_set(times, record)
    rec_states = np.empty((len(rec), n_paths, d))
    full = isinstance(record, str) and record == "full"
    incs = np.empty((len(times) - 1, n_paths, d)) if full else None
    alive = np.ones(n_paths, dtype=bool)
    exploded = np.zeros(n_paths, dtype=bool)
    exit_times = np.full(n_paths, np.nan)
    rng = substream(seed, "mild")  # same stream as simulate_mild: coupled runs
    fac, drift_fac = _mild_factors(cs, dt)
    pos = 0
    if rec and rec[0] == 0:
        rec_states[0] = X
        pos = 1
    for k in range(len(times) - 1):
        dW = rng.normal(0.0, math.sqrt(dt), size=(n_paths, d))
        if incs is not None:
            incs[k] = dW
        cand = _transformed_step(cs, u, lam, float(times[k]), fac, drift_fac,
                                 X, dW, level)
        X, alive = _advance(X, cand, alive, exploded, exit_times, float(times[k + 1]))
        if pos < len(rec) and rec[pos] == k + 1:
            rec_states[pos] = X
            pos += 1
    return SolutionPath(times, times[rec], rec_states, incs, exploded, exit_times)


# ---------------------------------------------------------------------------
# Galerkin projection study
# ---------------------------------------------------------------------------

@dataclass
class GalerkinTable:
    levels: list[int]
    errors: list[float]
    std_errors: list[float]
    reference_dim: int

    def rows(self):
        return list(zip(self.levels, self.errors, self.std_errors))


def galerkin_study(cs: CoefficientSet, x0, T: float, dt: float,
                   levels: list[int], n_paths: int, seed: int,
                   u: UGrid | None = None, lam: float | None = None,
                   record_stride: int = 4) -> GalerkinTable:
    """int_0^T E |X_t - X^{(n)}_t|^2 dt for Galerkin levels n.

    Level n projects drift, noise and start onto the first n modes; all
    levels replay the identical increment stream, so the reference and the
    full level n = d are bitwise equal and the error there is exactly zero.
    With u and lam the study runs on the transformed equation.
    """
    times = _grid(T, dt)
    rec_times = times[::record_stride]
    if rec_times[-1] != times[-1]:
        rec_times = np.append(rec_times, times[-1])

    def run(level: int | None) -> SolutionPath:
        if u is not None:
            if lam is None:
                raise ValueError("transformed study needs the damping rate")
            return simulate_transformed(cs, u, lam, x0, T, dt, n_paths, seed,
                                        record=rec_times, level=level)
        sub = cs if level is None else _project_set(cs, level)
        start = x0 if level is None else project(np.asarray(x0, float), level)
        return simulate_mild(sub, start, T, dt, n_paths, seed, record=rec_times)

    ref = run(None)
    errors, ses = [], []
    for n in levels:
        approx = run(int(n))
        sq = ((ref.states - approx.states) ** 2).sum(axis=2)  # (R, N)
        mean_sq = sq.mean(axis=1)
        err = float(_trapz(mean_sq, rec_times))
        per_path = _trapz(sq, rec_times, axis=0)
        ses.append(float(per_path.std(ddof=1) / math.sqrt(n_paths)))
        errors.append(err)
    return GalerkinTable([int(n) for n in levels], errors, ses, cs.dim)


def _project_set(cs: CoefficientSet, n: int) -> CoefficientSet:
    base_B, base_b = cs.regular_drift, cs.singular_drift

    def proj_drift(fn):
        if fn is None:
            return None
        return lambda t, X: project(fn(t, X), n)

    return CoefficientSet(cs.op, OutputProjectedNoise(cs.noise, n),
                          regular_drift=proj_drift(base_B),
                          singular_drift=proj_drift(base_b),
                          modulus=cs.modulus, singular_bound=cs.singular_bound,
                          regular_lipschitz=cs.regular_lipschitz,
                          growth=cs.growth, name=f"{cs.name}|pi_{n}",
                          meta=dict(cs.meta))


# ---------------------------------------------------------------------------
# Non-explosion monitor (Bihari bound)
# ---------------------------------------------------------------------------

@dataclass
class ExplosionReport:
    max_violation: float
    explosion_count: int
    n_paths: int
    worst_time: float


class _BihariScale:
    """Psi(s) = int_1^s dr / (2 Phi(r)) on a log grid with monotone inversion."""

    def __init__(self, Phi, T: float, lo: float = 1e-12, hi: float = 1e12,
                 n: int = 4801):
        r = np.geomspace(lo, hi, n)
        r = np.unique(np.concatenate([r, [1.0]]))
        vals = 1.0 / (2.0 * np.asarray(Phi(T, r), dtype=float))
        psi = cumulative_trapezoid(vals, r, initial=0.0)
        anchor = int(np.searchsorted(r, 1.0))
        psi -= psi[anchor]
        self.r = r
        self.psi = psi

    def forward(self, s):
        s = np.clip(s, self.r[0], self.r[-1])
        return np.interp(s, self.r, self.psi)

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v > self.psi[-1]):
            raise RuntimeError("Bihari inversion out of range; enlarge the grid")
        return np.interp(v, self.psi, self.r)


def explosion_monitor(cs: CoefficientSet, x0, T: float, dt: float,
                      n_paths: int, seed: int) -> ExplosionReport:
    """Check |Y_t|^2 <= Psi^{-1}(Psi(alpha_t) + t) along simulated paths.

    Y = X - xi with xi the stochastic convolution accumulated by the same
    recursion (B = b = 0, reusing the increments), and
    alpha_t = |x0|^2 + 2 int_0^t h(|xi_s|) ds by trapezoid quadrature.
    """
    if cs.growth is None:
        raise ValueError("explosion monitor needs declared growth data (Phi, h)")
    times = _grid(T, dt)
    d = cs.dim
    x0 = np.asarray(x0, dtype=float)
    X = np.broadcast_to(x0, (n_paths, d)).copy()
    xi = np.zeros((n_paths, d))
    rng = substream(seed, "mild")
    fac, drift_fac = _mild_factors(cs, dt)
    scale = _BihariScale(cs.growth.Phi, T)

    alive = np.ones(n_paths, dtype=bool)
    exploded = np.zeros(n_paths, dtype=bool)
    exit_times = np.full(n_paths, np.nan)

    alpha = np.full(n_paths, float(x0 @ x0))
    h_prev = np.asarray(cs.growth.h(T, np.linalg.norm(xi, axis=1)), dtype=float)
    worst = -math.inf
    worst_time = 0.0
    for k in range(len(times) - 1):
        dW = rng.normal(0.0, math.sqrt(dt), size=(n_paths, d))
        QdW = cs.noise.apply(float(times[k]), X, dW)
        cand = (fac * X + drift_fac * cs.total_drift(float(times[k]), X)
                + fac * QdW)
        X, alive = _advance(X, cand, alive, exploded, exit_times, float(times[k + 1]))
        xi = fac * xi + fac * QdW
        h_new = np.asarray(cs.growth.h(T, np.linalg.norm(xi, axis=1)), dtype=float)
        alpha = alpha + dt * (h_prev + h_new)  # 2 * trapezoid of h(|xi|)
        h_prev = h_new
        Y = X - xi
        bound = scale.inverse(scale.forward(alpha) + float(times[k + 1]))
        violation = float(((Y**2).sum(axis=1) - bound).max())
        if violation > worst:
            worst = violation
            worst_time = float(times[k + 1])
    return ExplosionReport(worst, int(exploded.sum()), n_paths, worst_time)
