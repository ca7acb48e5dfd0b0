"""Reference linear equation dZ = AZ dt + Q(Z) dW and its gradient estimators.

The integrator is exponential Euler on the eigenbasis: the semigroup factor
e^{-lam_n dt} is applied to the state together with the left-point noise
increment, which keeps the recursion stable for stiff modes and reproduces
the mild formulation exactly when drift is absent.

First and second derivative flows are propagated with the same increments,
feeding the Bismut gradient and the Markov-split Hessian estimators.  All
stochastic integrals are left-point (Ito) sums on the simulation grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, SingularNoiseError
from .rng import substream

COND_CAP = 1e8  # reject steps where cond(QQ*) exceeds this


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo estimate with its standard error and replay data."""

    estimate: float
    std_error: float
    n_paths: int
    seed: int

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "std_error": self.std_error,
                "N": self.n_paths, "seed": self.seed}


def _mc(values: np.ndarray, seed: int) -> McEstimate:
    n = values.size
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return McEstimate(float(values.mean()), se, n, seed)


def _as_ensemble(x: np.ndarray, n: int, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.size != d:
            raise ValueError("state vector has wrong dimension")
        return np.broadcast_to(x, (n, d)).copy()
    if x.shape != (n, d):
        raise ValueError(f"expected ensemble of shape {(n, d)}, got {x.shape}")
    return x.copy()


def _uniform_grid(s: float, t: float, dt: float) -> np.ndarray:
    if dt <= 0.0:
        raise ValueError("time step must be positive")
    span = t - s
    if span < 0.0:
        raise ValueError("requires t >= s")
    if span == 0.0:
        return np.array([s])
    n = int(round(span / dt))
    if n == 0 or abs(n * dt - span) > 1e-9 * max(1.0, span):
        raise ValueError(f"step {dt} does not divide the interval length {span}")
    return s + dt * np.arange(n + 1)


def _ou_step(cs: CoefficientSet, t0: float, dt: float, Z: np.ndarray,
             dW: np.ndarray, J=None, Jp=None, G2=None):
    """One exponential-Euler step of the linear equation and its flows.

    Z'  = e^{-lam dt} (Z + Q(Z) dW)
    J'  = e^{-lam dt} (J + (grad_J Q)(Z) dW)              first flow
    G2' = e^{-lam dt} (G2 + [(grad_G2 Q) + hess Q[Jp, J]](Z) dW)   second flow
    """
    fac = np.exp(-cs.op.eigenvalues * dt)
    noise = cs.noise
    Zn = fac * (Z + noise.apply(t0, Z, dW))
    Jn = Jpn = G2n = None
    if J is not None:
        Jn = fac * (J + noise.grad_apply(t0, Z, J, dW))
    if Jp is not None:
        Jpn = fac * (Jp + noise.grad_apply(t0, Z, Jp, dW))
    if G2 is not None:
        dG2 = noise.grad_apply(t0, Z, G2, dW) + noise.hess_apply(t0, Z, Jp, J, dW)
        G2n = fac * (G2 + dG2)
    return Zn, Jn, Jpn, G2n


def _check_condition(cs: CoefficientSet, t0: float, Z: np.ndarray):
    cond = cs.noise.qq_condition(t0, Z)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > COND_CAP:
        raise SingularNoiseError(
            f"cond(QQ*) = {worst:.3g} exceeds {COND_CAP:.0e} at t = {t0:.6g}")


@dataclass
class _Evolution:
    final: np.ndarray
    flow: np.ndarray | None = None
    flow_prime: np.ndarray | None = None
    second_flow: np.ndarray | None = None
    bismut_integral: np.ndarray | None = None
    gradg_integral: np.ndarray | None = None
    second_integral: np.ndarray | None = None
    log_weight: np.ndarray | None = None
    records: list = field(default_factory=list)


def _evolve(cs: CoefficientSet, times: np.ndarray, X0: np.ndarray,
            rng: np.random.Generator, *, eta=None, eta_prime=None,
            with_second: bool = False, accumulate_bismut: bool = False,
            girsanov: bool = False, record_idx: frozenset = frozenset()) -> _Evolution:
    """Stream the ensemble along an explicit (possibly nonuniform) time grid."""
    d = cs.dim
    Z = np.array(X0, dtype=float)
    n = Z.shape[0]

    def flow_init(v):
        if v is None:
            return None
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(v, (n, d)).copy() if v.ndim == 1 else v.copy()

    J = flow_init(eta)
    Jp = flow_init(eta_prime)
    if (J is not None or Jp is not None) and not cs.noise.differentiable:
        raise ValueError("derivative flows need a differentiable noise operator")
    G2 = np.zeros((n, d)) if with_second else None
    if with_second and (J is None or Jp is None):
        raise ValueError("the second flow needs both first-flow directions")

    bis = np.zeros(n) if accumulate_bismut else None
    gg = np.zeros(n) if (accumulate_bismut and with_second) else None
    sec = np.zeros(n) if (accumulate_bismut and with_second) else None
    logw = np.zeros(n) if girsanov else None

    out = _Evolution(final=Z)
    if 0 in record_idx:
        out.records.append(Z.copy())
    guard = accumulate_bismut or girsanov
    if guard and cs.noise.is_constant and len(times) > 1:
        _check_condition(cs, float(times[0]), Z)  # constant Q: check once
    for k in range(len(times) - 1):
        t0 = float(times[k])
        dt = float(times[k + 1] - times[k])
        dW = rng.normal(0.0, math.sqrt(dt), size=(n, d))
        if guard and not cs.noise.is_constant:
            _check_condition(cs, t0, Z)
        if accumulate_bismut:
            bis += np.sum(cs.noise.gstar_apply(t0, Z, J) * dW, axis=1)
            if with_second:
                gg += np.sum(cs.noise.grad_gstar_apply(t0, Z, Jp, J) * dW, axis=1)
                sec += np.sum(cs.noise.gstar_apply(t0, Z, G2) * dW, axis=1)
        if girsanov:
            u = cs.noise.gstar_apply(t0, Z, cs.b(t0, Z))
            logw += np.sum(u * dW, axis=1) - 0.5 * np.sum(u * u, axis=1) * dt
        Z, J, Jp, G2 = _ou_step(cs, t0, dt, Z, dW, J, Jp, G2)
        if (k + 1) in record_idx:
            out.records.append(Z.copy())

    out.final = Z
    out.flow, out.flow_prime, out.second_flow = J, Jp, G2
    out.bismut_integral, out.gradg_integral, out.second_integral = bis, gg, sec
    out.log_weight = logw
    return out


# ---------------------------------------------------------------------------
# Path container
# ---------------------------------------------------------------------------

@dataclass
class OuPath:
    """Stored trajectory of the linear equation, replayable step by step."""

    times: np.ndarray                 # (K+1,)
    states: np.ndarray                # (K+1, n, d)
    increments: np.ndarray            # (K, n, d), scaled sqrt(dt)
    flow: np.ndarray | None = None          # first flow for eta
    flow_prime: np.ndarray | None = None    # first flow for eta'
    second_flow: np.ndarray | None = None


def simulate_ou(cs: CoefficientSet, s: float, t: float, x, dt: float, seed: int,
                flows: str = "none", eta=None, eta_prime=None,
                n_paths: int = 1) -> OuPath:
    """Exponential-Euler trajectory of the linear equation on [s, t].

    flows: "none" | "first" | "second".  The first flow starts at eta; the
    second flow pairs eta with eta_prime and starts at zero.
    """
    if flows not in ("none", "first", "second"):
        raise ValueError(f"unknown flows mode {flows!r}")
    times = _uniform_grid(s, t, dt)
    d = cs.dim
    Z = _as_ensemble(x, n_paths, d)
    if flows != "none" and not cs.noise.differentiable:
        raise ValueError("derivative flows need a differentiable noise operator")

    def init(v, name):
        if v is None:
            raise ValueError(f"{name} direction required for flows={flows!r}")
        v = np.asarray(v, dtype=float)
        return np.broadcast_to(v, (n_paths, d)).copy()

    J = init(eta, "eta") if flows in ("first", "second") else None
    Jp = init(eta_prime, "eta_prime") if flows == "second" else None
    G2 = np.zeros((n_paths, d)) if flows == "second" else None

    K = len(times) - 1
    states = np.empty((K + 1, n_paths, d))
    incs = np.empty((K, n_paths, d))
    flow_rec = np.empty_like(states) if J is not None else None
    flowp_rec = np.empty_like(states) if Jp is not None else None
    g2_rec = np.empty_like(states) if G2 is not None else None

    rng = substream(seed, "ou-path")
    states[0] = Z
    if flow_rec is not None:
        flow_rec[0] = J
    if flowp_rec is not None:
        flowp_rec[0] = Jp
    if g2_rec is not None:
        g2_rec[0] = G2
    for k in range(K):
        dt_k = float(times[k + 1] - times[k])
        dW = rng.normal(0.0, math.sqrt(dt_k), size=(n_paths, d))
        incs[k] = dW
        Z, J, Jp, G2 = _ou_step(cs, float(times[k]), dt_k, Z, dW, J, Jp, G2)
        states[k + 1] = Z
        if flow_rec is not None:
            flow_rec[k + 1] = J
        if flowp_rec is not None:
            flowp_rec[k + 1] = Jp
        if g2_rec is not None:
            g2_rec[k + 1] = G2
    return OuPath(times, states, incs, flow_rec, flowp_rec, g2_rec)


def path_reconstruction_defect(cs: CoefficientSet, path: OuPath) -> float:
    """Replay every stored step from its predecessor and the stored increment.

    Returns the max absolute deviation; exact replays give 0.0 bitwise since
    the same floating-point operations are reapplied.
    """
    worst = 0.0
    for k in range(len(path.times) - 1):
        dt = float(path.times[k + 1] - path.times[k])
        J = path.flow[k] if path.flow is not None else None
        Jp = path.flow_prime[k] if path.flow_prime is not None else None
        G2 = path.second_flow[k] if path.second_flow is not None else None
        Zn, Jn, Jpn, G2n = _ou_step(cs, float(path.times[k]), dt,
                                    path.states[k], path.increments[k], J, Jp, G2)
        worst = max(worst, float(np.abs(Zn - path.states[k + 1]).max()))
        if Jn is not None:
            worst = max(worst, float(np.abs(Jn - path.flow[k + 1]).max()))
        if G2n is not None:
            worst = max(worst, float(np.abs(G2n - path.second_flow[k + 1]).max()))
    return worst


# ---------------------------------------------------------------------------
# Exact sampler and semigroup estimators
# ---------------------------------------------------------------------------

def sample_ou_exact(cs: CoefficientSet, s: float, t: float, x, n_paths: int,
                    seed: int) -> np.ndarray:
    """Exact Gaussian transition draw, constant diagonal Q only.

    Mode n has mean e^{-lam_n (t-s)} x_n and variance
    q_n^2 (1 - e^{-2 lam_n (t-s)}) / (2 lam_n).
    """
    if not cs.noise.is_constant:
        raise ValueError("exact sampling requires constant Q; use simulate_ou")
    if t < s:
        raise ValueError("requires t >= s")
    d = cs.dim
    x = np.asarray(x, dtype=float)
    tau = t - s
    lam = cs.op.eigenvalues
    q = cs.noise.diag(s, np.zeros((1, d)))[0]
    mean = np.exp(-lam * tau) * x
    if tau == 0.0:
        return np.broadcast_to(mean, (n_paths, d)).copy()
    std = np.sqrt(q**2 * -np.expm1(-2.0 * lam * tau) / (2.0 * lam))
    rng = substream(seed, "ou-exact")
    return mean + std * rng.normal(size=(n_paths, d))


def semigroup_eval(cs: CoefficientSet, s: float, t: float, f, x, n_paths: int,
                   seed: int, dt: float | None = None) -> McEstimate:
    """Monte Carlo estimate of E f(Z_{s,t}^x); deterministic given the seed."""
    if n_paths <= 0:
        raise ValueError("need at least one path")
    if dt is None:
        dt = max((t - s) / 64.0, 1e-12)
    if t == s:
        val = float(np.asarray(f(np.asarray(x, float)[None, :]))[0])
        return McEstimate(val, 0.0, n_paths, seed)
    times = _uniform_grid(s, t, dt)
    ev = _evolve(cs, times, _as_ensemble(x, n_paths, cs.dim),
                 substream(seed, "semigroup"))
    return _mc(np.asarray(f(ev.final), dtype=float), seed)


def bismut_gradient(cs: CoefficientSet, s: float, t: float, f, x, eta,
                    n_paths: int, seed: int, dt: float | None = None) -> McEstimate:
    """Bismut estimate of the directional derivative of P0_{s,t} f at x.

    Averages f(Z_{s,t}) / (t-s) * int_s^t <Q*(QQ*)^{-1}(Z) grad_eta Z, dW>
    with the integral accumulated on the simulation grid.
    """
    if t <= s:
        raise ValueError("bismut gradient needs t > s")
    if dt is None:
        dt = (t - s) / 64.0
    times = _uniform_grid(s, t, dt)
    ev = _evolve(cs, times, _as_ensemble(x, n_paths, cs.dim),
                 substream(seed, "bismut"), eta=eta, accumulate_bismut=True)
    vals = np.asarray(f(ev.final), dtype=float) * ev.bismut_integral / (t - s)
    return _mc(vals, seed)


def fd_gradient(cs: CoefficientSet, s: float, t: float, f, x, eta,
                n_paths: int, seed: int, dt: float | None = None,
                h: float = 1e-3) -> McEstimate:
    """Central finite difference of the semigroup with common random numbers.

    Serves as the independent cross-check of bismut_gradient: both ensembles
    x +/- h eta consume the identical increment stream.
    """
    if dt is None:
        dt = (t - s) / 64.0
    times = _uniform_grid(s, t, dt)
    d = cs.dim
    eta = np.asarray(eta, dtype=float)
    Zp = _as_ensemble(np.asarray(x, float) + h * eta, n_paths, d)
    Zm = _as_ensemble(np.asarray(x, float) - h * eta, n_paths, d)
    rng = substream(seed, "fd-gradient")
    for k in range(len(times) - 1):
        dt_k = float(times[k + 1] - times[k])
        dW = rng.normal(0.0, math.sqrt(dt_k), size=(n_paths, d))
        Zp, _, _, _ = _ou_step(cs, float(times[k]), dt_k, Zp, dW)
        Zm, _, _, _ = _ou_step(cs, float(times[k]), dt_k, Zm, dW)
    diffs = (np.asarray(f(Zp), float) - np.asarray(f(Zm), float)) / (2.0 * h)
    return _mc(diffs, seed)


def bismut_hessian(cs: CoefficientSet, s: float, t: float, f, x, eta, eta_prime,
                   n_outer: int, n_inner: int, seed: int,
                   dt: float | None = None) -> McEstimate:
    """Second directional derivative of P0_{s,t} f via the Markov split.

    The interval is split at the midpoint m.  Three outer accumulators are
    built on [s, m] (Bismut integral of the eta flow, the gradient of the
    direction map along the eta' flow, and the second-flow integral); the
    inner factor P0_{m,t} f and its eta'-directional gradient are estimated
    by a nested Monte Carlo over an independent sub-stream.
    """
    if t <= s:
        raise ValueError("bismut hessian needs t > s")
    if dt is None:
        dt = (t - s) / 64.0
    tm = 0.5 * (s + t)
    d = cs.dim
    outer = _evolve(cs, _auto_grid(s, tm, dt), _as_ensemble(x, n_outer, d),
                    substream(seed, "hessian", "outer"),
                    eta=eta, eta_prime=eta_prime, with_second=True,
                    accumulate_bismut=True)
    Zm, Jpm = outer.final, outer.flow_prime

    starts = np.repeat(Zm, n_inner, axis=0)
    dirs = np.repeat(Jpm, n_inner, axis=0)
    inner = _evolve(cs, _auto_grid(tm, t, dt), starts,
                    substream(seed, "hessian", "inner"),
                    eta=dirs, accumulate_bismut=True)
    fvals = np.asarray(f(inner.final), dtype=float).reshape(n_outer, n_inner)
    m_in = inner.bismut_integral.reshape(n_outer, n_inner)
    value = fvals.mean(axis=1)
    grad = (fvals * m_in).mean(axis=1) / (t - tm)

    per_path = 2.0 * (grad * outer.bismut_integral
                      + value * (outer.gradg_integral + outer.second_integral)) / (t - s)
    return _mc(per_path, seed)


def _auto_grid(s: float, t: float, dt: float) -> np.ndarray:
    # Internal grids round the step to fit the interval instead of insisting
    # on exact divisibility.
    n = max(1, int(round((t - s) / dt)))
    return np.linspace(s, t, n + 1)


def resolvent_eval(cs: CoefficientSet, lam: float, s: float, t: float, f, x,
                   n_paths: int, seed: int, dt: float | None = None,
                   n_quad: int = 128) -> McEstimate:
    """Resolvent int_s^t e^{-(r-s) lam} P0_{s,r} f_r (x) dr by composite midpoint.

    f is time dependent: f(r, Z) -> (n,).  A single path ensemble supplies
    every marginal, so the quadrature nodes share randomness.
    """
    if lam < 0.0:
        raise ValueError("resolvent rate must be nonnegative")
    if t <= s:
        return McEstimate(0.0, 0.0, n_paths, seed)
    h = (t - s) / n_quad
    mids = s + h * (np.arange(n_quad) + 0.5)
    grid = np.concatenate([[s], mids, [t]])
    ev = _evolve(cs, grid, _as_ensemble(x, n_paths, cs.dim),
                 substream(seed, "resolvent"),
                 record_idx=frozenset(range(1, n_quad + 1)))
    acc = np.zeros(n_paths)
    for j, r in enumerate(mids):
        acc += h * math.exp(-(r - s) * lam) * np.asarray(f(r, ev.records[j]), float)
    return _mc(acc, seed)
