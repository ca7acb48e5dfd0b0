"""Change of measure along reference paths and its consequences.

The reference process Z solves the linear equation (singular drift removed);
the exponential weight

    log R_T = sum_k <{Q*(QQ*)^{-1} b}(Z_k), dW_k> - 1/2 sum_k |{...}(Z_k)|^2 dt

turns E[f(Z_T) R_T] into the semigroup of the full equation.  The module
also hosts the strong-Feller continuity probe and the composed Harnack
inequality for constant noise.

All operations require a vanishing regular drift: the weight only absorbs
the singular part b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSet
from .ou import (McEstimate, _check_condition, _mc, _ou_step, _uniform_grid,
                 _as_ensemble)
from .rng import substream


def _require_pure_singular(cs: CoefficientSet):
    if cs.has_regular_drift:
        raise ValueError("the Girsanov layer assumes a vanishing regular drift; "
                         "fold B into b or use the mild simulator directly")


@dataclass
class WeightedPath:
    """Reference trajectory plus the running log-weight (final value per path)."""

    times: np.ndarray
    states: np.ndarray            # (K+1, n, d) when recorded, else (1, n, d)
    increments: np.ndarray | None
    log_weight: np.ndarray        # (n,)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def weight(self) -> np.ndarray:
        return np.exp(self.log_weight)


def girsanov_weight(cs: CoefficientSet, x, T: float, dt: float, n_paths: int,
                    seed: int, record: str = "final") -> WeightedPath:
    """Simulate the reference process and accumulate the exponential weight.

    record="full" stores states and increments so the log-weight can be
    recomputed exactly from the stored data.
    """
    _require_pure_singular(cs)
    times = _uniform_grid(0.0, T, dt)
    d = cs.dim
    Z = _as_ensemble(x, n_paths, d)
    rng = substream(seed, "girsanov")
    logw = np.zeros(n_paths)
    if cs.noise.is_constant and len(times) > 1:
        _check_condition(cs, 0.0, Z)
    full = record == "full"
    states = np.empty((len(times), n_paths, d)) if full else None
    incs = np.empty((len(times) - 1, n_paths, d)) if full else None
    if full:
        states[0] = Z
    for k in range(len(times) - 1):
        t0 = float(times[k])
        step = float(times[k + 1] - times[k])
        dW = rng.normal(0.0, math.sqrt(step), size=(n_paths, d))
        if not cs.noise.is_constant:
            _check_condition(cs, t0, Z)
        u = cs.noise.gstar_apply(t0, Z, cs.b(t0, Z))
        logw += np.sum(u * dW, axis=1) - 0.5 * np.sum(u * u, axis=1) * step
        if full:
            incs[k] = dW
        Z, _, _, _ = _ou_step(cs, t0, step, Z, dW)
        if full:
            states[k + 1] = Z
    if not full:
        states = Z[None, :, :]
    return WeightedPath(times, states, incs, logw)


def recompute_log_weight(cs: CoefficientSet, wp: WeightedPath) -> np.ndarray:
    """Rebuild log R_T from the stored states and increments (exact replay)."""
    if wp.increments is None:
        raise ValueError("recomputation needs a full-record weighted path")
    n = wp.states.shape[1]
    logw = np.zeros(n)
    for k in range(len(wp.times) - 1):
        t0 = float(wp.times[k])
        step = float(wp.times[k + 1] - wp.times[k])
        u = cs.noise.gstar_apply(t0, wp.states[k], cs.b(t0, wp.states[k]))
        logw += np.sum(u * wp.increments[k], axis=1) \
            - 0.5 * np.sum(u * u, axis=1) * step
    return logw


def weak_representation(cs: CoefficientSet, f, x, T: float, dt: float,
                        n_paths: int, seed: int) -> McEstimate:
    """Estimate of the full semigroup P_T f(x) as E[f(Z_T) R_T]."""
    wp = girsanov_weight(cs, x, T, dt, n_paths, seed)
    vals = np.asarray(f(wp.final), dtype=float) * wp.weight
    return _mc(vals, seed)


# ---------------------------------------------------------------------------
# Strong Feller probe
# ---------------------------------------------------------------------------

@dataclass
class ContinuityTable:
    radii: list[float]
    gaps: list[float]
    std_errors: list[float]
    base_value: float
    noise_floor: float
    seed: int

    def rows(self):
        return list(zip(self.radii, self.gaps, self.std_errors))


def half_space_indicator(x, direction=None):
    """Indicator of the half space through x with the given unit normal."""
    x = np.asarray(x, dtype=float)
    e = np.zeros_like(x)
    if direction is None:
        e[0] = 1.0
    else:
        e = np.asarray(direction, dtype=float) / np.linalg.norm(direction)

    def f(Z):
        return ((Z - x) @ e > 0.0).astype(float)

    return f


def strong_feller_probe(cs: CoefficientSet, f, x, radii, T: float, dt: float,
                        n_paths: int, seed: int, direction=None) -> ContinuityTable:
    """|P_T f(x + r e) - P_T f(x)| over shrinking r with shared randomness.

    f = None uses the built-in half-space indicator through x.  The noise
    floor is what independent (non-coupled) estimation would resolve:
    3 sqrt(2) times the largest single-estimate standard error.
    """
    x = np.asarray(x, dtype=float)
    e = np.zeros_like(x)
    if direction is None:
        e[0] = 1.0
    else:
        e = np.asarray(direction, dtype=float) / np.linalg.norm(direction)
    if f is None:
        f = half_space_indicator(x, e)

    base = weak_representation(cs, f, x, T, dt, n_paths, seed)
    gaps, ses = [], []
    for r in radii:
        shifted = weak_representation(cs, f, x + r * e, T, dt, n_paths, seed)
        gaps.append(abs(shifted.estimate - base.estimate))
        ses.append(math.hypot(shifted.std_error, base.std_error))
    floor = 3.0 * math.sqrt(2.0) * max(max(ses), base.std_error)
    return ContinuityTable([float(r) for r in radii], gaps, ses,
                           base.estimate, floor, seed)


# ---------------------------------------------------------------------------
# Composed Harnack inequality (constant noise)
# ---------------------------------------------------------------------------

@dataclass
class HarnackReport:
    lhs: float
    rhs: float
    margin: float
    margin_std_error: float
    components: dict
    unstable_moments: bool

    @property
    def holds(self) -> bool:
        return self.margin >= -3.0 * self.margin_std_error


def _median_of_means(groups: np.ndarray) -> float:
    return float(np.median(groups))


def harnack_compose(cs: CoefficientSet, f, x, y, T: float, p: float, dt: float,
                    n_paths: int, seed: int, n_groups: int = 16) -> HarnackReport:
    """Both sides of the composed Harnack chain for positive bounded f.

    lhs = (P_T f(x))^{p^3}
    rhs = (P_T f^{p^3})(y) (E[(R^y)^{1/(1-p)}])^{p-1}
          (E[(R^x)^{p/(1-p)}])^{p^2 (p-1)} exp(p^2 |x-y|^2 / (2 lam_T (p-1)))
    with lam_T = sup_t ||Q*(QQ*)^{-1}||^2.  Negative weight moments are
    estimated by median-of-means over seed groups to resist heavy tails.
    """
    _require_pure_singular(cs)
    if not cs.noise.is_constant:
        raise ValueError("the composed Harnack check supports constant Q only")
    if p <= 1.0:
        raise ValueError("the Harnack exponent must satisfy p > 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    per_group = max(2, n_paths // n_groups)
    p3 = p**3

    a1 = np.empty(n_groups)  # P_T f(x)
    a2 = np.empty(n_groups)  # P_T f^{p^3}(y)
    a3 = np.empty(n_groups)  # E (R^y)^{1/(1-p)}
    a4 = np.empty(n_groups)  # E (R^x)^{p/(1-p)}
    for g in range(n_groups):
        wx = girsanov_weight(cs, x, T, dt, per_group, seed + 1000003 * g)
        wy = girsanov_weight(cs, y, T, dt, per_group, seed + 1000003 * g + 1)
        fx = np.asarray(f(wx.final), dtype=float)
        fy = np.asarray(f(wy.final), dtype=float)
        a1[g] = float((fx * wx.weight).mean())
        a2[g] = float((fy**p3 * wy.weight).mean())
        a3[g] = float(np.exp(wy.log_weight / (1.0 - p)).mean())
        a4[g] = float(np.exp(wx.log_weight * p / (1.0 - p)).mean())

    lam_T = cs.noise.gstar_norm(0.0, np.zeros(cs.dim)) ** 2
    gap2 = float(((x - y) ** 2).sum())
    exp_factor = math.exp(p**2 * gap2 / (2.0 * lam_T * (p - 1.0)))

    m3 = _median_of_means(a3)
    m4 = _median_of_means(a4)

    def margin_of(v1, v2, v3, v4):
        return (v2 * v3 ** (p - 1.0) * v4 ** (p**2 * (p - 1.0)) * exp_factor
                - v1**p3)

    margin = margin_of(a1.mean(), a2.mean(), m3, m4)
    group_margins = np.array([margin_of(a1[g], a2[g], a3[g], a4[g])
                              for g in range(n_groups)])
    margin_se = float(group_margins.std(ddof=1) / math.sqrt(n_groups))

    def unstable(vals):
        med = np.median(vals)
        iqr = np.subtract(*np.percentile(vals, [75, 25]))
        return bool(med > 0 and iqr / med > 1.0)

    components = {"P_T_f_x": float(a1.mean()), "P_T_fp3_y": float(a2.mean()),
                  "neg_moment_y": m3, "neg_moment_x": m4,
                  "exp_factor": exp_factor, "lam_T": lam_T}
    return HarnackReport(float(a1.mean() ** p3), float(margin + a1.mean() ** p3),
                         float(margin), margin_se, components,
                         unstable(a3) or unstable(a4))
