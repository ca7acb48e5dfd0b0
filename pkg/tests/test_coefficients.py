"""Coefficient sets: envelope certificates, cylindricity, truncation, growth."""

import numpy as np
import pytest

from spdelab.coefficients import (ConstantDiagonalNoise, CoefficientSet,
                                  DiniModulus, GrowthPair, TanhDiagonalNoise,
                                  builtin_coefficients, cylindrical_defect,
                                  modulus_envelope_check, one_sided_growth_check,
                                  smoothstep_cutoff, truncate_coefficients)
from spdelab.rng import substream
from spdelab.spectral import SpectralOperator, dirichlet_laplacian

OP4 = SpectralOperator(np.array([1.0, 2.0, 4.0, 8.0]), trace_exponent=0.5)


def test_envelope_constant_drift_passes():
    phi = DiniModulus("log_power", K=1.0, delta=0.5, c=8.0)
    vec = np.array([0.3, 0.0, 0.0, 0.0])
    cs = CoefficientSet(OP4, ConstantDiagonalNoise(np.ones(4)),
                        singular_drift=lambda t, X: np.broadcast_to(vec, X.shape),
                        modulus=phi, singular_bound=0.3)
    rep = modulus_envelope_check(cs, T=1.0, n_samples=200, seed=5)
    assert rep.max_violation <= 0.0  # zero oscillation: violation = -min phi


def test_envelope_builtin_dini_passes_by_construction():
    cs = builtin_coefficients("dini", OP4)
    rep = modulus_envelope_check(cs, T=1.0, n_samples=400, seed=6)
    assert rep.max_violation <= 1e-12


def test_envelope_detects_undersized_modulus():
    # b(x) = v |x_1|^(1/2) against a Holder envelope with K too small
    phi = DiniModulus("holder", K=0.25, alpha=0.5)

    def b(t, X):
        out = np.zeros_like(X)
        out[:, 0] = np.sqrt(np.abs(X[:, 0]))
        return out

    cs = CoefficientSet(OP4, ConstantDiagonalNoise(np.ones(4)),
                        singular_drift=b, modulus=phi, singular_bound=np.inf)
    rep = modulus_envelope_check(cs, T=1.0, n_samples=400, seed=7)
    assert rep.max_violation > 0.0


def test_cylindrical_defect_constant_q():
    cs = builtin_coefficients("zero", OP4)
    x = substream(3, "cyl").normal(size=4)
    for n in (1, 2, 3, 4):
        assert cylindrical_defect(cs, 0.5, x, n) == 0.0


def test_cylindrical_defect_tanh_q():
    cs = builtin_coefficients("dini_mult", OP4)  # noise level m = 2
    x = np.array([0.7, -1.1, 2.0, -0.4])
    # projection fixed point at n >= m
    assert cylindrical_defect(cs, 0.0, x, 2) == 0.0
    assert cylindrical_defect(cs, 0.0, x, 4) == 0.0
    # below the level the defect equals the entrywise brute-force value
    eps = cs.meta["eps_q"]
    expected = abs(eps) * abs(np.tanh(x[1]) - np.tanh(0.0))
    assert cylindrical_defect(cs, 0.0, x, 1) == pytest.approx(expected, rel=1e-12)


def test_smoothstep_shape():
    assert smoothstep_cutoff(0.3) == 1.0
    assert smoothstep_cutoff(1.0) == 1.0
    assert smoothstep_cutoff(2.0) == 0.0
    assert smoothstep_cutoff(5.0) == 0.0
    assert smoothstep_cutoff(1.5) == pytest.approx(0.5, abs=1e-12)
    r = np.linspace(0.0, 3.0, 301)
    assert np.all(np.diff(smoothstep_cutoff(r)) <= 1e-12)


def test_truncation_regions():
    cs = builtin_coefficients("dini", OP4)
    m = 2.0
    trunc = truncate_coefficients(cs, m)
    inside = np.array([[0.5, 0.2, 0.0, 0.1]])
    np.testing.assert_allclose(trunc.b(1.0, inside), cs.b(1.0, inside), rtol=1e-14)
    far = np.array([[4.0, 1.0, 1.0, 1.0]])  # |z| > 2m
    np.testing.assert_array_equal(trunc.b(0.5, far), np.zeros((1, 4)))
    edge = np.zeros((1, 4))
    edge[0, 0] = 1.5 * m  # |z| = 1.5 m: scaled by the fixed smoothstep value
    expected = cs.b(0.5, edge) * smoothstep_cutoff(1.5)
    np.testing.assert_allclose(trunc.b(0.5, edge), expected, rtol=1e-14)
    with pytest.raises(ValueError):
        truncate_coefficients(cs, 0.0)


def test_truncation_keeps_envelope_with_lipschitz_slack():
    cs = builtin_coefficients("dini", OP4)
    m = 2.0
    trunc = truncate_coefficients(cs, m)
    rng = substream(11, "trunc-envelope")
    phi = cs.modulus
    slack = cs.singular_bound / m
    worst = -np.inf
    for _ in range(300):
        x = rng.normal(scale=2.0, size=4)
        y = x + rng.normal(scale=rng.choice([1e-3, 0.1, 1.0]), size=4)
        gap = np.linalg.norm(x - y)
        diff = np.linalg.norm(trunc.b(0.3, x[None])[0] - trunc.b(0.3, y[None])[0])
        worst = max(worst, diff - float(phi(gap)) - slack * gap)
    assert worst <= 1e-10


def test_truncated_noise_matches_untruncated_inside():
    cs = builtin_coefficients("dini_mult", OP4)
    trunc = truncate_coefficients(cs, 3.0)
    X = np.array([[0.4, -0.2, 0.6, 0.1]])  # |proj_2 z| < 3
    np.testing.assert_allclose(trunc.noise.diag(0.0, X), cs.noise.diag(0.0, X),
                               rtol=1e-14)


def test_noise_positive_definiteness_floor():
    cs = builtin_coefficients("dini_mult", OP4)
    rng = substream(13, "floor")
    X = rng.normal(scale=3.0, size=(256, 4))
    q = cs.noise.diag(0.0, X)
    assert float((q**2).min(axis=1).min()) >= 0.5  # half the Q0 floor


def test_eps_q_admissibility_rejected_when_large():
    with pytest.raises(ValueError):
        TanhDiagonalNoise(np.ones(4), eps=1.0, level=2)


def test_growth_check_zero_drift():
    growth = GrowthPair(Phi=lambda t, r: np.ones_like(np.asarray(r, float)),
                        h=lambda t, r: np.ones_like(np.asarray(r, float)))
    cs = CoefficientSet(OP4, ConstantDiagonalNoise(np.ones(4)), growth=growth)
    rep = one_sided_growth_check(cs, T=1.0, n_samples=300, seed=2)
    assert rep.max_violation <= -1.0  # zero drift: lhs = 0, bound >= 2


def test_growth_check_dissipative_builtin():
    cs = builtin_coefficients("dissipative", OP4)
    rep = one_sided_growth_check(cs, T=2.0, n_samples=600, seed=3)
    # completing the square: <-(x+y), x> <= |y|^2/4 <= Phi + h - 2
    assert rep.max_violation <= 0.0


def test_growth_check_detects_superlinear_drift():
    growth = GrowthPair(Phi=lambda t, r: 1.0 + np.asarray(r, float),
                        h=lambda t, r: 1.0 + np.asarray(r, float) ** 2 / 4.0)
    op1 = SpectralOperator(np.array([1.0]))
    cs = CoefficientSet(op1, ConstantDiagonalNoise(np.ones(1)),
                        regular_drift=lambda t, X: X**3, growth=growth,
                        regular_lipschitz=np.inf)
    rep = one_sided_growth_check(cs, T=1.0, n_samples=400, seed=4)
    assert rep.max_violation > 0.0


def test_growth_check_requires_declaration():
    cs = builtin_coefficients("zero", OP4)
    with pytest.raises(ValueError):
        one_sided_growth_check(cs, 1.0, 10, 0)


def test_builtins_construct_on_default_operator():
    op = dirichlet_laplacian(8)
    for name in ("zero", "dini", "holder", "dini_mult", "dissipative"):
        cs = builtin_coefficients(name, op)
        X = substream(1, name).normal(size=(5, 8))
        assert cs.total_drift(0.1, X).shape == (5, 8)
        assert cs.noise.diag(0.1, X).shape == (5, 8)


def test_unknown_builtin_rejected():
    with pytest.raises(ValueError):
        builtin_coefficients("nope", OP4)
