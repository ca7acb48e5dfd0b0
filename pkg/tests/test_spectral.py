"""Spectral operator: semigroup action, projections, trace diagnostics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from spdelab.rng import substream
from spdelab.spectral import (SpectralOperator, dirichlet_laplacian,
                              from_growth_law, project, semigroup_apply,
                              semigroup_hs_integral, trace_diagnostic)


def test_semigroup_identity_at_zero():
    op = dirichlet_laplacian(6)
    x = substream(1, "sg0").normal(size=6)
    assert np.array_equal(semigroup_apply(op, 0.0, x), x)


def test_semigroup_closed_form():
    op = SpectralOperator(np.array([1.0, 2.0]))
    out = semigroup_apply(op, np.log(2.0), np.array([1.0, 1.0]))
    np.testing.assert_allclose(out, [0.5, 0.25], rtol=1e-14)


def test_semigroup_matches_ode_integrator():
    # oracle: high-accuracy RK45 on xdot = A x with lam_n = n^2
    op = from_growth_law(5, 1.0, 2.0)
    x0 = substream(7, "ode").normal(size=5)
    sol = solve_ivp(lambda t, y: -op.eigenvalues * y, (0.0, 0.1), x0,
                    rtol=1e-11, atol=1e-13)
    ours = semigroup_apply(op, 0.1, x0)
    np.testing.assert_allclose(ours, sol.y[:, -1], atol=1e-8)


def test_semigroup_rejects_negative_time():
    op = dirichlet_laplacian(2)
    with pytest.raises(ValueError):
        semigroup_apply(op, -1e-9, np.zeros(2))


def test_project_basics():
    x = np.array([3.0, 4.0])
    np.testing.assert_array_equal(project(x, 1), [3.0, 0.0])
    np.testing.assert_array_equal(project(x, 2), x)
    with pytest.raises(ValueError):
        project(x, 0)
    with pytest.raises(ValueError):
        project(x, 3)


@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=1000))
@settings(max_examples=30, deadline=None)
def test_project_idempotent(n, seed):
    x = substream(seed, "proj").normal(size=8)
    once = project(x, n)
    np.testing.assert_array_equal(project(once, n), once)


@given(st.floats(min_value=0.0, max_value=3.0), st.floats(min_value=0.0, max_value=3.0),
       st.integers(min_value=0, max_value=100))
@settings(max_examples=40, deadline=None)
def test_semigroup_property_and_contraction(s, t, seed):
    op = dirichlet_laplacian(4)
    x = substream(seed, "sgprop").normal(size=4)
    lhs = semigroup_apply(op, s + t, x)
    rhs = semigroup_apply(op, s, semigroup_apply(op, t, x))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert np.linalg.norm(semigroup_apply(op, t, x)) <= np.linalg.norm(x) + 1e-12


@given(st.integers(min_value=1, max_value=4), st.floats(min_value=0.0, max_value=2.0),
       st.integers(min_value=0, max_value=100))
@settings(max_examples=30, deadline=None)
def test_projection_commutes_with_semigroup(n, t, seed):
    op = dirichlet_laplacian(4)
    x = substream(seed, "comm").normal(size=4)
    lhs = project(semigroup_apply(op, t, x), n)
    rhs = semigroup_apply(op, t, project(x, n))
    np.testing.assert_array_equal(lhs, rhs)


def test_operator_validation():
    with pytest.raises(ValueError):
        SpectralOperator(np.array([1.0, 0.5]))  # decreasing
    with pytest.raises(ValueError):
        SpectralOperator(np.array([-1.0, 2.0]))
    with pytest.raises(ValueError):
        SpectralOperator(np.array([1.0]), trace_exponent=1.5)


def test_trace_diagnostic_convergent_quadratic_growth():
    # lam_n = n^2, eps = 0.4: exponent p(1-eps) = 1.2 > 1
    op = from_growth_law(64, 1.0, 2.0, trace_exponent=0.4)
    diag = trace_diagnostic(op)
    assert diag.convergent is True
    expected = sum(float(n) ** (-1.2) for n in range(1, 65))
    assert diag.partial_sum == pytest.approx(expected, rel=1e-12)
    # integral-test oracle for the tail
    oracle_tail, _ = quad(lambda v: v**-1.2, 64, np.inf)
    assert diag.tail_estimate == pytest.approx(oracle_tail, rel=1e-9)


def test_trace_diagnostic_divergent_linear_growth():
    op = from_growth_law(16, 1.0, 1.0, trace_exponent=0.5)
    diag = trace_diagnostic(op)
    assert diag.convergent is False
    assert diag.tail_estimate == np.inf


def test_trace_diagnostic_explicit_list():
    op = SpectralOperator(np.array([2.0, 3.0, 5.0]), trace_exponent=0.25)
    diag = trace_diagnostic(op)
    expected = 2.0**-0.75 + 3.0**-0.75 + 5.0**-0.75
    assert diag.partial_sum == pytest.approx(expected, rel=1e-14)
    assert diag.convergent is None and diag.tail_estimate is None


def test_hs_integral_stationary_limit():
    op = SpectralOperator(np.array([1.0]))
    assert semigroup_hs_integral(op, 60.0) == pytest.approx(0.5, rel=1e-12)


def test_hs_integral_quadrature_oracle():
    op = SpectralOperator(np.array([1.0, 2.0]))
    s = np.linspace(0.0, 1.0, 200001)
    hs2 = np.exp(-2.0 * s[:, None] * op.eigenvalues).sum(axis=1)
    oracle = np.trapezoid(hs2, s) if hasattr(np, "trapezoid") else np.trapz(hs2, s)
    assert semigroup_hs_integral(op, 1.0) == pytest.approx(float(oracle), abs=1e-10)


def test_hs_integral_short_time_taylor():
    op = dirichlet_laplacian(5)
    t = 1e-12
    assert semigroup_hs_integral(op, t) == pytest.approx(5 * t, rel=1e-6)
    with pytest.raises(ValueError):
        semigroup_hs_integral(op, 0.0)
