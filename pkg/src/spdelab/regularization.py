"""Fixed-point construction of the regularizing function u and theta = id + u.

u is the solution of the damped backward equation

    u_s = int_s^T e^{-lam (t-s)} P0_{s,t} (grad_{b_t} u_t + b_t) dt,  u_T = 0,

obtained by Picard iteration of the map Gamma.  u is represented on a
time x space lattice over the first d_u modes; evaluation clamps the state
to the lattice box (u is bounded, so clamping is consistent), modes beyond
d_u enter only through that clamped projection.

Gamma is evaluated with one fixed Monte Carlo seed table per time node, so
a solve iterates a deterministic map and contraction ratios are meaningful
numbers rather than noise.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .coefficients import CoefficientSet, DiniModulus
from .ou import _ou_step  # shared stepping kernel
from .quadrature import integrate_dyadic
from .rng import substream


@dataclass(frozen=True)
class LatticeSpec:
    """Discretisation of u: box [-half_width, half_width]^d_u, uniform axes."""

    d_u: int = 2
    points_per_axis: int = 33
    n_time: int = 9
    half_width: float | None = None  # None: 4 x stationary sd of the slowest mode

    def resolve_half_width(self, cs: CoefficientSet) -> float:
        if self.half_width is not None:
            return float(self.half_width)
        q = cs.noise.diag(0.0, np.zeros((1, cs.dim)))[0]
        lam = cs.op.eigenvalues
        sd = q / np.sqrt(2.0 * lam)
        return 4.0 * float(sd.max())


@dataclass
class UGrid:
    """Lattice representation of u with multilinear/linear interpolation."""

    T: float
    lam: float
    dim: int
    times: np.ndarray                # (Nt,), uniform on [0, T]
    axes: tuple[np.ndarray, ...]     # d_u uniform axes
    values: np.ndarray               # (Nt, n1, ..., n_du, dim)

    _grad_cache: dict = field(default_factory=dict, repr=False)

    @property
    def d_u(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    def copy_with(self, values: np.ndarray) -> "UGrid":
        return UGrid(self.T, self.lam, self.dim, self.times, self.axes, values)

    # -- interpolation ------------------------------------------------------

    def _space_weights(self, X: np.ndarray):
        idx, frac = [], []
        for a, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            u = np.clip((X[:, a] - ax[0]) / h, 0.0, len(ax) - 1 - 1e-12)
            i0 = np.floor(u).astype(np.intp)
            idx.append(i0)
            frac.append(u - i0)
        return idx, frac

    def _interp_space(self, V: np.ndarray, X: np.ndarray) -> np.ndarray:
        # Multilinear gather through flat indices: one fancy index per corner
        # on a 2-d view is far cheaper than nested advanced indexing.
        idx, frac = self._space_weights(X)
        n = X.shape[0]
        ch_shape = V.shape[self.d_u:]
        n_ch = int(np.prod(ch_shape)) if ch_shape else 1
        Vf = V.reshape(-1, n_ch)
        shape = self.shape
        strides = np.cumprod([1] + list(shape[::-1][:-1]))[::-1]
        out = np.zeros((n, n_ch))
        for corner in product((0, 1), repeat=self.d_u):
            w = np.ones(n)
            flat = np.zeros(n, dtype=np.intp)
            for a, bit in enumerate(corner):
                w = w * (frac[a] if bit else 1.0 - frac[a])
                flat += (idx[a] + bit) * strides[a]
            out += w[:, None] * Vf[flat]
        return out.reshape((n,) + ch_shape)

    def _time_bracket(self, s: float):
        s = min(max(s, 0.0), self.T)
        if len(self.times) == 1:
            return 0, 0, 0.0
        h = self.times[1] - self.times[0]
        u = min(max(s / h, 0.0), len(self.times) - 1 - 1e-12)
        k = int(u)
        return k, k + 1, u - k

    def _time_blend(self, s: float, node) -> np.ndarray:
        # Linear time interpolation commutes with the spatial interpolation,
        # and blending the small lattice arrays first halves the gathers.
        k0, k1, w = self._time_bracket(s)
        A = node(k0)
        if w == 0.0:
            return A
        return (1.0 - w) * A + w * node(k1)

    def evaluate(self, s: float, X: np.ndarray) -> np.ndarray:
        """u_s at states X (n, dim); clamped outside the lattice box."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._interp_space(self._time_blend(s, lambda k: self.values[k]), X)

    def _node_gradient(self, k: int) -> np.ndarray:
        if k not in self._grad_cache:
            grads = [np.gradient(self.values[k], ax, axis=a)
                     for a, ax in enumerate(self.axes)]
            self._grad_cache[k] = np.stack(grads, axis=-1)  # (..., dim, d_u)
        return self._grad_cache[k]

    def gradient(self, s: float, X: np.ndarray) -> np.ndarray:
        """Lattice finite-difference Jacobian (n, dim, d_u), interpolated."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._interp_space(self._time_blend(s, self._node_gradient), X)

    def directional(self, s: float, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """grad_V u_s(X): the Jacobian applied to the first d_u modes of V."""
        J = self.gradient(s, X)
        return np.einsum("nij,nj->ni", J, V[:, :self.d_u])

    # -- certificates ---------------------------------------------------------

    def grad_sup(self) -> float:
        """sup over the lattice of the spectral norm of the Jacobian of u."""
        worst = 0.0
        for k in range(len(self.times)):
            J = self._node_gradient(k).reshape(-1, self.dim, self.d_u)
            worst = max(worst, float(np.linalg.svd(J, compute_uv=False)[:, 0].max()))
        return worst

    def second_difference_sup(self) -> float:
        """sup of pure second differences of u along lattice axes."""
        worst = 0.0
        for k in range(len(self.times)):
            V = self.values[k]
            for a, ax in enumerate(self.axes):
                h = ax[1] - ax[0]
                d2 = np.diff(V, n=2, axis=a) / h**2
                if d2.size:
                    worst = max(worst, float(np.abs(d2).max()))
        return worst

    def theta_gradient_bounds(self) -> tuple[float, float]:
        """(sup ||grad theta||, sup ||grad theta^{-1}||) over the lattice."""
        sup_fwd = 0.0
        sup_inv = 0.0
        eye = np.eye(self.dim)
        for k in range(len(self.times)):
            J = self._node_gradient(k).reshape(-1, self.dim, self.d_u)
            M = np.broadcast_to(eye, (J.shape[0], self.dim, self.dim)).copy()
            M[:, :, :self.d_u] += J
            sv = np.linalg.svd(M, compute_uv=False)
            sup_fwd = max(sup_fwd, float(sv[:, 0].max()))
            smin = sv[:, -1].min()
            if smin <= 0.0:
                return math.inf, math.inf
            sup_inv = max(sup_inv, float(1.0 / sv[:, -1].min()))
        return sup_fwd, sup_inv

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def zero_ugrid(cs: CoefficientSet, T: float, lam: float, spec: LatticeSpec) -> UGrid:
    L = spec.resolve_half_width(cs)
    axes = tuple(np.linspace(-L, L, spec.points_per_axis)
                 for _ in range(min(spec.d_u, cs.dim)))
    times = np.linspace(0.0, T, spec.n_time)
    shape = (spec.n_time,) + tuple(len(a) for a in axes) + (cs.dim,)
    return UGrid(T, lam, cs.dim, times, axes, np.zeros(shape))


# ---------------------------------------------------------------------------
# The map Gamma and the Picard solver
# ---------------------------------------------------------------------------

def _quadrature_cells(s: float, T: float, n_quad: int, refine: int):
    """Composite-midpoint cells on [s, T], the leading 1/16 refined.

    The integrand carries a (t-s)^{-1/2} gradient factor, so the short-time
    region [s, s + (T-s)/16] gets `refine` x finer cells.
    """
    span = T - s
    base = span / n_quad
    n_fine = max(1, n_quad // 16)
    edges = [s]
    for i in range(n_fine):
        a = s + i * base
        for j in range(refine):
            edges.append(a + (j + 1) * base / refine)
    for i in range(n_fine, n_quad):
        edges.append(s + (i + 1) * base)
    edges = np.asarray(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)
    return mids, widths


def _lattice_points(u: UGrid) -> np.ndarray:
    mesh = np.meshgrid(*u.axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    full = np.zeros((pts.shape[0], u.dim))
    full[:, :u.d_u] = pts
    return full


def gamma_apply(u: UGrid, cs: CoefficientSet, lam: float, n_paths: int, seed: int,
                n_quad: int = 64, refine: int = 4) -> UGrid:
    """One application of Gamma: damped time integral of P0 (grad_b u + b).

    Each time node gets its own fixed increment stream keyed by the node
    index only, so repeated applications reuse identical randomness and the
    composition is a deterministic map of the lattice values.
    """
    if lam < 0.0:
        raise ValueError("damping rate must be nonnegative")
    if cs.has_singular_drift and not np.isfinite(cs.singular_bound):
        raise ValueError("Gamma needs a bounded singular drift")
    T = u.T
    new_values = np.zeros_like(u.values)
    if not cs.has_singular_drift:
        return u.copy_with(new_values)

    pts = _lattice_points(u)
    n_pts = pts.shape[0]
    lattice_shape = u.shape
    skip_grad = u.is_zero
    for i, s_i in enumerate(u.times):
        if s_i >= T:
            continue
        mids, widths = _quadrature_cells(float(s_i), T, n_quad, refine)
        rng = substream(seed, "gamma", i)
        Z = np.repeat(pts, n_paths, axis=0)
        acc = np.zeros((n_pts, cs.dim))
        t_prev = float(s_i)
        for m_q, w_q in zip(mids, widths):
            dW = rng.normal(0.0, math.sqrt(m_q - t_prev), size=Z.shape)
            Z, _, _, _ = _ou_step(cs, t_prev, m_q - t_prev, Z, dW)
            t_prev = float(m_q)
            g = cs.b(m_q, Z)
            if not skip_grad:
                g = g + u.directional(m_q, Z, g)
            weight = w_q * math.exp(-lam * (m_q - s_i))
            acc += weight * g.reshape(n_pts, n_paths, cs.dim).mean(axis=1)
        new_values[i] = acc.reshape(lattice_shape + (cs.dim,))
    return u.copy_with(new_values)


class NonContractionError(RuntimeError):
    """Picard iteration failed to contract; retry with a larger damping rate."""

    def __init__(self, lam: float, diffs: list[float], ratios: list[float]):
        super().__init__(
            f"Picard iteration not contracting at lam={lam:g} "
            f"(last ratios {[round(r, 3) for r in ratios[-3:]]}); "
            f"increase the damping rate")
        self.lam = lam
        self.diffs = diffs
        self.ratios = ratios


@dataclass
class USolveResult:
    u: UGrid
    lam: float
    iterations: int
    diffs: list[float]
    ratios: list[float]
    grad_bound: float
    residual: float
    converged: bool

    @property
    def contraction_ratio(self) -> float:
        return self.ratios[-1] if self.ratios else 0.0

    def certificate(self) -> dict:
        return {"lam": self.lam, "iterations": self.iterations,
                "ratios": self.ratios, "grad_bound": self.grad_bound,
                "residual": self.residual, "converged": self.converged}


def solve_u(cs: CoefficientSet, T: float, lam: float, *, lattice: LatticeSpec,
            tol: float = 1e-4, max_iters: int = 40, n_paths: int = 192,
            seed: int = 0, n_quad: int = 64) -> USolveResult:
    """Picard iteration u^0 = 0, u^{k+1} = Gamma u^k to a sup-lattice tolerance.

    Aborts with NonContractionError after three consecutive ratios >= 1.
    """
    if lam <= 0.0:
        raise ValueError("damping rate must be positive")
    u = zero_ugrid(cs, T, lam, lattice)
    diffs: list[float] = []
    ratios: list[float] = []
    for it in range(1, max_iters + 1):
        u_next = gamma_apply(u, cs, lam, n_paths, seed, n_quad=n_quad)
        diff = float(np.abs(u_next.values - u.values).max())
        if diffs:
            ratios.append(diff / diffs[-1] if diffs[-1] > 0 else 0.0)
        diffs.append(diff)
        u = u_next
        if diff < tol:
            return USolveResult(u, lam, it, diffs, ratios, u.grad_sup(),
                                diff, True)
        if len(ratios) >= 3 and all(r >= 1.0 for r in ratios[-3:]):
            raise NonContractionError(lam, diffs, ratios)
    return USolveResult(u, lam, max_iters, diffs, ratios, u.grad_sup(),
                        diffs[-1], False)


@dataclass
class LambdaSelection:
    lam: float
    result: USolveResult
    attempts: list[dict]


def select_lambda(cs: CoefficientSet, T: float, *, lattice: LatticeSpec,
                  seed: int = 0, tol: float = 1e-4, n_paths: int = 192,
                  lam0: float = 4.0, ratio_cap: float = 0.5,
                  grad_cap: float = 1.0 / 8.0, lam_max: float = 2.0**20,
                  n_quad: int = 64) -> LambdaSelection:
    """Double the damping rate from lam0 until the contraction ratio is <= 1/2
    and the lattice gradient bound is <= 1/8; returns the first passing rate."""
    lam = lam0
    attempts = []
    while lam <= lam_max:
        try:
            res = solve_u(cs, T, lam, lattice=lattice, tol=tol,
                          n_paths=n_paths, seed=seed, n_quad=n_quad)
            ratio = res.contraction_ratio
            attempts.append({"lam": lam, "ratio": ratio,
                             "grad_bound": res.grad_bound,
                             "converged": res.converged})
            if res.converged and ratio <= ratio_cap and res.grad_bound <= grad_cap:
                return LambdaSelection(lam, res, attempts)
        except NonContractionError as err:
            attempts.append({"lam": lam, "ratio": math.inf,
                             "grad_bound": math.inf, "converged": False,
                             "error": str(err)})
        lam *= 2.0
    raise RuntimeError(f"no damping rate up to {lam_max:g} certified the solve; "
                       f"attempts: {attempts}")


# ---------------------------------------------------------------------------
# theta = id + u
# ---------------------------------------------------------------------------

def theta_apply(u: UGrid, s: float, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    out = X + u.evaluate(s, X)
    return out[0] if single else out


def theta_invert(u: UGrid, s: float, y: np.ndarray, tol: float = 1e-10,
                 max_iter: int = 200) -> np.ndarray:
    """Invert theta_s by the fixed point x <- y - u_s(x).

    Converges geometrically at rate ||grad u|| < 1; certified grids give
    rate <= 1/8.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    X = Y.copy()
    for _ in range(max_iter):
        X_next = Y - u.evaluate(s, X)
        delta = float(np.abs(X_next - X).max())
        X = X_next
        if delta < tol:
            return X[0] if single else X
    raise RuntimeError(f"theta inversion did not reach {tol:g} "
                       f"within {max_iter} iterations")


# ---------------------------------------------------------------------------
# Hessian decay certificate
# ---------------------------------------------------------------------------

def hessian_scale_bound(phi: DiniModulus, lam: float, T: float, eps: float,
                        c1: float = 1.0, c2: float = 1.0) -> float:
    """c1 int_0^T e^{-lam s} phi(c2 s^{eps/2}) / s ds.

    Decreasing in lam with limit 0; serves as the scale certificate for
    lattice second differences of u.
    """
    if T < 0.0:
        raise ValueError("horizon must be nonnegative")
    if T == 0.0:
        return 0.0
    res = integrate_dyadic(
        lambda s: math.exp(-lam * s) * float(phi(c2 * s ** (eps / 2.0))) / s,
        upper=T)
    if not res.convergent:
        raise RuntimeError("hessian scale integral diverged; the modulus is "
                           "not Dini admissible")
    return c1 * res.value


# ---------------------------------------------------------------------------
# Serialization: JSON header + CSV value table
# ---------------------------------------------------------------------------

def save_ugrid(u: UGrid, directory: str) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    header_path = os.path.join(directory, "ugrid.json")
    values_path = os.path.join(directory, "ugrid_values.csv")
    header = {
        "T": u.T, "lam": u.lam, "dim": u.dim, "d_u": u.d_u,
        "times": [float(t) for t in u.times],
        "axes": [[float(v) for v in ax] for ax in u.axes],
    }
    with open(header_path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")
    shape = u.shape
    with open(values_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_index"]
                        + [f"i{a}" for a in range(u.d_u)]
                        + [f"v{j}" for j in range(u.dim)])
        for k in range(len(u.times)):
            flat = u.values[k].reshape(-1, u.dim)
            for r, multi in enumerate(product(*[range(nn) for nn in shape])):
                writer.writerow([k, *multi, *[repr(float(v)) for v in flat[r]]])
    return [header_path, values_path]


def load_ugrid(directory: str) -> UGrid:
    with open(os.path.join(directory, "ugrid.json")) as fh:
        header = json.load(fh)
    times = np.asarray(header["times"], dtype=float)
    axes = tuple(np.asarray(ax, dtype=float) for ax in header["axes"])
    dim = int(header["dim"])
    shape = (len(times),) + tuple(len(a) for a in axes) + (dim,)
    values = np.zeros(shape)
    with open(os.path.join(directory, "ugrid_values.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        d_u = len(axes)
        for row in reader:
            k = int(row[0])
            multi = tuple(int(v) for v in row[1:1 + d_u])
            values[(k,) + multi] = [float(v) for v in row[1 + d_u:]]
    return UGrid(float(header["T"]), float(header["lam"]), dim, times, axes, values)
