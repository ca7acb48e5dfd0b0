"""Dini modulus validation: class membership certificates and the integral."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdelab.coefficients import (DiniModulus, ModulusError, load_modulus_table,
                                  require_valid_modulus, validate_modulus)

# Semi-analytic value of int_0^1 ds / (s log^1.5(8 + 1/s)), computed by
# splitting at v = log u and summing the exact v^-3/2 tail; stable to 1e-9
# across split points.
LOG_POWER_INTEGRAL_K1_D05_C8 = 1.8691447327


def test_holder_half_closed_form():
    # int_0^1 K s^(alpha-1) ds = K / alpha = 2 for K=1, alpha=1/2
    rep = validate_modulus(DiniModulus("holder", K=1.0, alpha=0.5))
    assert rep.accepted
    assert rep.dini_integral == pytest.approx(2.0, abs=1e-8)


def test_log_power_accepted_with_quadrature_value():
    rep = validate_modulus(DiniModulus("log_power", K=1.0, delta=0.5, c=8.0))
    assert rep.accepted
    assert rep.dini_integral == pytest.approx(LOG_POWER_INTEGRAL_K1_D05_C8, rel=0.02)


def test_log_power_delta_zero_divergent():
    rep = validate_modulus(DiniModulus("log_power", K=1.0, delta=0.0, c=8.0))
    assert not rep.convergent
    assert rep.dini_integral == math.inf
    assert not rep.accepted
    # rejection carries the partial-integral trace
    with pytest.raises(ModulusError) as err:
        require_valid_modulus(DiniModulus("log_power", K=1.0, delta=0.0, c=8.0))
    assert err.value.report is not None
    assert len(err.value.report.partial_sums) > 0


def test_log_power_small_c_fails_concavity_only():
    # at c = e the square of the modulus has a shallow convex dip even though
    # the Dini integral is finite
    rep = validate_modulus(DiniModulus("log_power", K=1.0, delta=0.5, c=math.e))
    assert rep.convergent
    assert not rep.concave_sq
    assert not rep.accepted


@given(st.integers(min_value=0, max_value=8))
@settings(max_examples=9, deadline=None)
def test_convergence_monotone_in_delta(k):
    # if the Dini integral converges at delta it converges at every larger
    # delta; full class-D acceptance is not monotone at fixed c because the
    # square-concavity margin shrinks as delta grows (c must grow with delta)
    delta = 0.15 * k
    lo = validate_modulus(DiniModulus("log_power", K=1.0, delta=delta, c=8.0))
    hi = validate_modulus(DiniModulus("log_power", K=1.0, delta=delta + 0.3, c=8.0))
    if lo.convergent:
        assert hi.convergent


def test_acceptance_monotone_in_delta_within_concave_range():
    accepted = [validate_modulus(DiniModulus("log_power", K=1.0, delta=d, c=8.0)).accepted
                for d in (0.15, 0.3, 0.5, 0.7, 0.9)]
    assert accepted == sorted(accepted)  # False..True transitions only upward
    assert all(accepted)


def test_holder_above_half_fails_square_concavity():
    # phi^2 = K^2 s^(2 alpha) is convex for alpha > 1/2
    rep = validate_modulus(DiniModulus("holder", K=1.0, alpha=0.8))
    assert rep.convergent
    assert not rep.concave_sq


def test_parameter_validation():
    with pytest.raises(ValueError):
        DiniModulus("log_power", K=-1.0)
    with pytest.raises(ValueError):
        DiniModulus("log_power", c=1.0)  # c >= e required
    with pytest.raises(ValueError):
        DiniModulus("holder", alpha=1.5)
    with pytest.raises(ValueError):
        DiniModulus("unknown")


def test_modulus_increasing_and_zero_at_origin():
    phi = DiniModulus("log_power", K=2.0, delta=0.5, c=8.0)
    s = np.linspace(0.0, 4.0, 200)
    vals = phi(s)
    assert vals[0] == 0.0
    assert np.all(np.diff(vals) >= 0.0)


def test_table_modulus_roundtrip(tmp_path):
    s = np.linspace(0.0, 1.0, 21)
    phi = np.sqrt(s)  # Holder(1/2) sampled
    path = tmp_path / "modulus.csv"
    with open(path, "w") as fh:
        fh.write("s,phi\n")
        for a, b in zip(s, phi):
            fh.write(f"{float(a)!r},{float(b)!r}\n")
    mod = load_modulus_table(path)
    rep = validate_modulus(mod)
    assert rep.accepted
    # piecewise-linear interpolant of sqrt: integral close to the smooth value
    assert rep.dini_integral == pytest.approx(2.0, rel=0.15)
