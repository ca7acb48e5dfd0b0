"""Linear-equation engine: exact sampler, scheme moments, Bismut estimators."""

import math

import numpy as np
import pytest

from spdelab.coefficients import SingularNoiseError, ConstantDiagonalNoise, CoefficientSet
from spdelab.ou import (bismut_gradient, bismut_hessian, fd_gradient,
                        path_reconstruction_defect, resolvent_eval,
                        sample_ou_exact, semigroup_eval, simulate_ou)
from spdelab.coefficients import builtin_coefficients
from spdelab.spectral import SpectralOperator, semigroup_hs_integral

OP2 = SpectralOperator(np.array([1.0, 2.0]), trace_exponent=0.5)
OP1 = SpectralOperator(np.array([1.0]), trace_exponent=0.5)

ZERO2 = builtin_coefficients("zero", OP2)
ZERO1 = builtin_coefficients("zero", OP1)
MULT2 = builtin_coefficients("dini_mult", OP2)


def ou_mean(cs, tau, x):
    return np.exp(-cs.op.eigenvalues * tau) * np.asarray(x)


def ou_var(cs, tau):
    lam = cs.op.eigenvalues
    return -np.expm1(-2.0 * lam * tau) / (2.0 * lam)


# ---------------------------------------------------------------------------
# Exact sampler
# ---------------------------------------------------------------------------

def test_exact_sampler_degenerate_interval():
    x = np.array([0.3, -1.2])
    draws = sample_ou_exact(ZERO2, 1.0, 1.0, x, 16, seed=0)
    np.testing.assert_array_equal(draws, np.broadcast_to(x, (16, 2)))


def test_exact_sampler_stationary_limit():
    # d=1, lam=1, q=1, long horizon: mean -> 0, variance -> 1/2
    n = 100_000
    draws = sample_ou_exact(ZERO1, 0.0, 50.0, np.array([2.0]), n, seed=1)
    se_mean = math.sqrt(0.5 / n)
    se_var = 0.5 * math.sqrt(2.0 / n)
    assert abs(draws.mean()) <= 4.0 * se_mean
    assert abs(draws.var(ddof=1) - 0.5) <= 4.0 * se_var


def test_exact_sampler_transient_moments():
    n = 100_000
    x = np.array([1.0, -0.5])
    tau = 0.3
    draws = sample_ou_exact(ZERO2, 0.2, 0.5, x, n, seed=2)
    mean, var = ou_mean(ZERO2, tau, x), ou_var(ZERO2, tau)
    for k in range(2):
        assert abs(draws[:, k].mean() - mean[k]) <= 4.0 * math.sqrt(var[k] / n)
        assert abs(draws[:, k].var(ddof=1) - var[k]) <= 4.0 * var[k] * math.sqrt(2.0 / n)


def test_exact_sampler_rejects_multiplicative_noise():
    with pytest.raises(ValueError):
        sample_ou_exact(MULT2, 0.0, 1.0, np.zeros(2), 8, seed=0)


# ---------------------------------------------------------------------------
# Scheme distribution and flows
# ---------------------------------------------------------------------------

def test_scheme_matches_exact_sampler_moments():
    n = 20_000
    tau = 0.3
    x = np.array([1.0, -0.5])
    path = simulate_ou(ZERO2, 0.0, tau, x, tau / 256, seed=3, n_paths=n)
    final = path.states[-1]
    mean, var = ou_mean(ZERO2, tau, x), ou_var(ZERO2, tau)
    for k in range(2):
        assert abs(final[:, k].mean() - mean[k]) <= 4.0 * math.sqrt(var[k] / n)
        # scheme variance bias O(lam dt) stays under the Monte Carlo band
        assert abs(final[:, k].var(ddof=1) - var[k]) <= 4.0 * var[k] * math.sqrt(2.0 / n)


def test_constant_noise_first_flow_is_deterministic_semigroup():
    eta = np.array([1.0, -2.0])
    path = simulate_ou(ZERO2, 0.0, 0.7, np.zeros(2), 0.7 / 32, seed=4,
                       flows="first", eta=eta, n_paths=8)
    expected = np.exp(-OP2.eigenvalues * 0.7) * eta
    np.testing.assert_allclose(path.flow[-1], np.broadcast_to(expected, (8, 2)),
                               rtol=1e-12)


def test_multiplicative_first_flow_moment_certificate():
    # sampled sup of E|grad_eta Z|^2 / |eta|^2 over t in [0, 1] stays bounded
    eta = np.array([1.0, 1.0]) / math.sqrt(2.0)
    path = simulate_ou(MULT2, 0.0, 1.0, np.zeros(2), 1.0 / 64, seed=5,
                       flows="first", eta=eta, n_paths=4000)
    ratios = (path.flow**2).sum(axis=2).mean(axis=1)  # per time node
    assert float(ratios.max()) <= 10.0  # reported constant: modest multiple of |eta|^2


def test_path_reconstruction_bitwise():
    path = simulate_ou(MULT2, 0.0, 0.5, np.array([0.2, -0.1]), 0.5 / 32,
                       seed=6, flows="first", eta=np.array([1.0, 0.0]),
                       n_paths=32)
    assert path_reconstruction_defect(MULT2, path) == 0.0


def test_seed_determinism_bitwise():
    a = simulate_ou(MULT2, 0.0, 0.5, np.zeros(2), 0.5 / 16, seed=7, n_paths=64)
    b = simulate_ou(MULT2, 0.0, 0.5, np.zeros(2), 0.5 / 16, seed=7, n_paths=64)
    assert np.array_equal(a.states, b.states)
    c = simulate_ou(MULT2, 0.0, 0.5, np.zeros(2), 0.5 / 16, seed=8, n_paths=64)
    assert not np.array_equal(a.states, c.states)


def test_simulate_ou_validates_input():
    with pytest.raises(ValueError):
        simulate_ou(ZERO2, 0.0, 1.0, np.zeros(2), -0.1, seed=0)
    with pytest.raises(ValueError):
        simulate_ou(ZERO2, 0.0, 1.0, np.zeros(2), 0.3, seed=0)  # not divisible
    with pytest.raises(ValueError):
        simulate_ou(ZERO2, 0.0, 1.0, np.zeros(2), 0.25, seed=0, flows="first")


# ---------------------------------------------------------------------------
# Semigroup evaluation
# ---------------------------------------------------------------------------

def test_semigroup_eval_constant_function():
    est = semigroup_eval(ZERO2, 0.0, 0.5, lambda Z: np.ones(len(Z)),
                         np.zeros(2), 5000, seed=9)
    assert est.estimate == 1.0
    assert est.std_error == 0.0


def test_semigroup_eval_first_and_second_moment():
    n = 100_000
    x = np.array([1.0, 0.0])
    tau = 0.4
    mean1 = float(ou_mean(ZERO2, tau, x)[0])
    var1 = float(ou_var(ZERO2, tau)[0])
    est = semigroup_eval(ZERO2, 0.0, tau, lambda Z: Z[:, 0], x, n, seed=10,
                         dt=tau / 128)
    assert abs(est.estimate - mean1) <= 4.0 * est.std_error
    est2 = semigroup_eval(ZERO2, 0.0, tau, lambda Z: Z[:, 0] ** 2, x, n,
                          seed=11, dt=tau / 128)
    assert abs(est2.estimate - (mean1**2 + var1)) <= 4.0 * est2.std_error


def test_semigroup_eval_rejects_empty_ensemble():
    with pytest.raises(ValueError):
        semigroup_eval(ZERO2, 0.0, 1.0, lambda Z: np.ones(len(Z)), np.zeros(2),
                       0, seed=0)


# ---------------------------------------------------------------------------
# Bismut gradient
# ---------------------------------------------------------------------------

def test_bismut_constant_function_is_centered():
    est = bismut_gradient(ZERO2, 0.0, 0.5, lambda Z: np.ones(len(Z)),
                          np.zeros(2), np.array([1.0, 0.0]), 40_000, seed=12)
    assert abs(est.estimate) <= 4.0 * est.std_error


def test_bismut_linear_function_closed_form():
    tau = 0.5
    eta = np.array([0.8])
    est = bismut_gradient(ZERO1, 0.0, tau, lambda Z: Z[:, 0], np.array([0.4]),
                          eta, 100_000, seed=13, dt=tau / 64)
    expected = math.exp(-tau) * eta[0]
    assert abs(est.estimate - expected) <= 4.0 * est.std_error


@pytest.mark.parametrize("name", ["zero", "dini_mult"])
def test_bismut_agrees_with_crn_finite_differences(name):
    cs = builtin_coefficients(name, OP2)
    x = np.array([0.3, -0.2])
    eta = np.array([1.0, 1.0]) / math.sqrt(2.0)
    tau = 0.4

    def f(Z):
        return np.tanh(Z[:, 0] + 0.5 * Z[:, 1])

    bis = bismut_gradient(cs, 0.0, tau, f, x, eta, 30_000, seed=14, dt=tau / 64)
    fd = fd_gradient(cs, 0.0, tau, f, x, eta, 30_000, seed=15, dt=tau / 64, h=1e-3)
    tol = 3.0 * math.hypot(bis.std_error, fd.std_error)
    assert abs(bis.estimate - fd.estimate) <= tol


def test_bismut_requires_positive_interval():
    with pytest.raises(ValueError):
        bismut_gradient(ZERO2, 0.5, 0.5, lambda Z: Z[:, 0], np.zeros(2),
                        np.array([1.0, 0.0]), 10, seed=0)


def test_condition_guard_triggers():
    lam = SpectralOperator(np.array([1.0, 1.0]))
    # a noise operator whose second diagonal entry can cross zero
    noise = ConstantDiagonalNoise(np.array([1.0, 1e-9]))
    cs = CoefficientSet(lam, noise, name="illcond")
    with pytest.raises(SingularNoiseError):
        bismut_gradient(cs, 0.0, 0.25, lambda Z: Z[:, 0], np.zeros(2),
                        np.array([1.0, 0.0]), 64, seed=1)


# ---------------------------------------------------------------------------
# Bismut Hessian
# ---------------------------------------------------------------------------

def test_hessian_linear_function_is_zero():
    est = bismut_hessian(ZERO1, 0.0, 0.5, lambda Z: Z[:, 0], np.array([0.2]),
                         eta=np.array([1.0]), eta_prime=np.array([1.0]),
                         n_outer=3000, n_inner=48, seed=16)
    assert abs(est.estimate) <= 4.0 * est.std_error


def test_hessian_quadratic_closed_form():
    tau = 0.5
    est = bismut_hessian(ZERO1, 0.0, tau, lambda Z: Z[:, 0] ** 2,
                         np.array([0.3]), eta=np.array([1.0]),
                         eta_prime=np.array([1.0]), n_outer=6000, n_inner=64,
                         seed=17, dt=tau / 32)
    expected = 2.0 * math.exp(-2.0 * tau)
    assert abs(est.estimate - expected) <= 4.0 * est.std_error


def test_hessian_dini_function_scale_certificate():
    # bounded f with Holder(1/2) envelope: |hessian| <= c1 phi(tau^(eps/2)) / tau,
    # the fitted c1 must stay of one scale across the dyadic tau grid
    def f(Z):
        return np.sqrt(np.minimum(np.abs(Z[:, 0]), 1.0))

    eps = ZERO1.op.trace_exponent
    ratios = []
    for tau in (0.125, 0.25, 0.5):
        est = bismut_hessian(ZERO1, 0.0, tau, f, np.array([0.5]),
                             eta=np.array([1.0]), eta_prime=np.array([1.0]),
                             n_outer=4000, n_inner=48, seed=18, dt=tau / 32)
        envelope = (tau ** (eps / 2.0)) ** 0.5 / tau
        ratios.append((abs(est.estimate) + est.std_error) / envelope)
    fitted_c1 = max(ratios)
    assert np.isfinite(fitted_c1)
    assert fitted_c1 / max(min(ratios), 1e-9) <= 25.0  # one-scale certificate


# ---------------------------------------------------------------------------
# Resolvent
# ---------------------------------------------------------------------------

def test_resolvent_constant_integrand():
    lam = 2.0
    tau = 1.0
    est = resolvent_eval(ZERO2, lam, 0.0, tau, lambda r, Z: np.ones(len(Z)),
                         np.zeros(2), 200, seed=19, n_quad=256)
    expected = (1.0 - math.exp(-lam * tau)) / lam
    assert est.estimate == pytest.approx(expected, abs=1e-5)
    assert est.std_error == pytest.approx(0.0, abs=1e-12)


def test_resolvent_zero_rate():
    est = resolvent_eval(ZERO2, 0.0, 0.0, 0.75, lambda r, Z: 3.0 * np.ones(len(Z)),
                         np.zeros(2), 100, seed=20, n_quad=128)
    assert est.estimate == pytest.approx(3.0 * 0.75, abs=1e-9)


def test_resolvent_linear_integrand_closed_form():
    # f_r(z) = z_1, constant Q: E z_1(r) = e^{-lam_1 r} x_1, so the resolvent
    # is x_1 (1 - e^{-(lam + lam_1) tau}) / (lam + lam_1)
    lam = 1.5
    tau = 1.0
    x = np.array([2.0, 0.0])
    est = resolvent_eval(ZERO2, lam, 0.0, tau, lambda r, Z: Z[:, 0], x,
                         60_000, seed=21, n_quad=256)
    lam1 = ZERO2.op.eigenvalues[0]
    expected = x[0] * (1.0 - math.exp(-(lam + lam1) * tau)) / (lam + lam1)
    quad_err = 1e-4
    assert abs(est.estimate - expected) <= 3.0 * est.std_error + quad_err


def test_resolvent_rejects_negative_rate():
    with pytest.raises(ValueError):
        resolvent_eval(ZERO2, -1.0, 0.0, 1.0, lambda r, Z: np.ones(len(Z)),
                       np.zeros(2), 10, seed=0)


# ---------------------------------------------------------------------------
# Module-level certificates
# ---------------------------------------------------------------------------

def test_short_time_gradient_bound_certificate():
    # |grad P0 f|^2 <= c/(t-s) P0 f^2 with one fitted c across a dyadic grid
    def f(Z):
        return np.tanh(Z[:, 0])

    x = np.array([0.4, 0.1])
    fits = []
    for tau in (0.0625, 0.125, 0.25, 0.5):
        grad = np.array([
            bismut_gradient(ZERO2, 0.0, tau, f, x, e, 20_000, seed=22,
                            dt=tau / 32).estimate
            for e in np.eye(2)])
        psq = semigroup_eval(ZERO2, 0.0, tau, lambda Z: f(Z) ** 2, x, 20_000,
                             seed=23, dt=tau / 32).estimate
        fits.append(float((grad**2).sum()) * tau / psq)
    c = max(fits)
    assert np.isfinite(c) and c > 0.0
    assert c / min(fits) <= 5.0


def test_stochastic_convolution_variance_bound():
    # E|Z - e^{tA}x|^2 <= ||Q||^2 2^eps sum lam_n^(eps-1) (t-s)^eps
    eps = MULT2.op.trace_exponent
    lam = MULT2.op.eigenvalues
    q_sup = 1.0 + MULT2.meta["eps_q"]
    bound_const = q_sup**2 * 2.0**eps * float((lam ** (eps - 1.0)).sum())
    x = np.array([0.5, -0.3])
    n = 20_000
    for tau in (0.1, 0.3, 1.0):
        path = simulate_ou(MULT2, 0.0, tau, x, tau / 64, seed=24, n_paths=n)
        beta = path.states[-1] - np.exp(-lam * tau) * x
        second = float((beta**2).sum(axis=1).mean())
        assert second <= bound_const * tau**eps


def test_constant_q_convolution_variance_closed_form():
    # for Q = I the convolution variance is the HS integral of the semigroup
    for tau in (0.2, 0.7):
        expected = semigroup_hs_integral(OP2, tau)
        var = float(ou_var(ZERO2, tau).sum())
        assert var == pytest.approx(expected, rel=1e-12)
