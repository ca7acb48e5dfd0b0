"""Dyadic quadrature for integrands with a possible singularity at zero.

Used for Dini-type integrals int_0^U f(s) ds where f may blow up at 0 in a
non-integrable way.  The interval is split into dyadic blocks
[U 2^-(k+1), U 2^-k]; each block is regular and integrated with
Gauss-Kronrod.  Convergence of the block series is classified from the
decay of the block values: geometric decay gets an exact geometric tail,
power-law decay gets a fitted p-series tail, and anything decaying like
1/k or slower is declared divergent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

# Divergence is declared when the running sum passes this cap or when the
# fitted block-decay exponent falls at or below _MIN_DECAY.
SUM_CAP = 1e6
_MIN_DECAY = 1.1
_FIT_WINDOW = 24


@dataclass(frozen=True)
class DyadicResult:
    value: float  # math.inf when divergent
    convergent: bool
    partial_sums: np.ndarray  # cumulative block sums, coarsest block first
    tail_estimate: float
    decay_exponent: float | None  # fitted p-series exponent; None if unused


def integrate_dyadic(f, upper: float = 1.0, levels: int = 60) -> DyadicResult:
    """Integrate f over (0, upper] by dyadic subdivision toward zero."""
    if upper <= 0.0:
        return DyadicResult(0.0, True, np.zeros(1), 0.0, None)
    blocks = np.empty(levels)
    for k in range(levels):
        a = upper * 2.0 ** (-(k + 1))
        b = upper * 2.0 ** (-k)
        blocks[k], _ = quad(f, a, b, limit=200)
    partial = np.cumsum(blocks)

    if not np.all(np.isfinite(blocks)) or partial[-1] > SUM_CAP:
        return DyadicResult(math.inf, False, partial, math.inf, None)

    window = blocks[-_FIT_WINDOW:]
    if np.any(window <= 0.0):
        # Integrand dies out near zero; the finite sum is the whole integral.
        return DyadicResult(float(partial[-1]), True, partial, 0.0, None)

    ratios = blocks[-6:] / blocks[-7:-1]
    rho = float(ratios.mean())
    if rho < 0.95 and float(ratios.std()) < 0.02 * max(rho, 0.1):
        # Geometric decay: the tail sum has a closed form.
        tail = float(blocks[-1] * rho / (1.0 - rho))
        return DyadicResult(float(partial[-1] + tail), True, partial, tail, None)

    # Power-law regime, blocks ~ C k^-q: the series converges iff q > 1.
    ks = np.arange(levels - _FIT_WINDOW, levels, dtype=float) + 1.0
    slope = np.polyfit(np.log(ks), np.log(window), 1)[0]
    q = -float(slope)
    if q <= _MIN_DECAY:
        return DyadicResult(math.inf, False, partial, math.inf, q)
    tail = float(blocks[-1] * levels / (q - 1.0))
    return DyadicResult(float(partial[-1] + tail), True, partial, tail, q)
