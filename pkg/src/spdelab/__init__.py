"""spdelab: spectral-Galerkin laboratory for semilinear stochastic evolution
equations with Dini-continuous singular drift and multiplicative noise."""

__version__ = "0.1.0"

from .coefficients import (BUILTIN_NAMES, CoefficientSet, DiniModulus,
                           builtin_coefficients, validate_modulus)
from .spectral import (SpectralOperator, dirichlet_laplacian, from_growth_law,
                       project, semigroup_apply, semigroup_hs_integral,
                       trace_diagnostic)

__all__ = [
    "__version__",
    "BUILTIN_NAMES", "CoefficientSet", "DiniModulus", "builtin_coefficients",
    "validate_modulus", "SpectralOperator", "dirichlet_laplacian",
    "from_growth_law", "project", "semigroup_apply", "semigroup_hs_integral",
    "trace_diagnostic",
]
