"""Run configuration: JSON documents validated into dataclasses.

A config fully determines a run together with the master seed; the CLI
serializes the validated form into the run manifest so replays reproduce
every output byte.  Environment variables with the SPDELAB_ prefix override
any key with double underscores as the path separator, for example
SPDELAB_EXPERIMENT__N_PATHS=5000.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import BUILTIN_NAMES, CoefficientSet, builtin_coefficients
from .spectral import SpectralOperator, dirichlet_laplacian, from_growth_law

ENV_PREFIX = "SPDELAB_"

CONFIG_SCHEMA = {
    "operator": {
        "kind": "dirichlet | power_law | explicit",
        "dimension": "int >= 1",
        "coefficient": "float > 0 (power_law)",
        "exponent": "float > 0 (power_law)",
        "eigenvalues": "[float, ...] (explicit)",
        "trace_exponent": "float in (0, 1), default 0.4",
    },
    "coefficients": {
        "builtin": " | ".join(BUILTIN_NAMES),
        "params": "family overrides, e.g. {K, delta, c, alpha, eps_q, locality}",
    },
    "experiment": "subcommand-specific parameters (T, dt, n_paths, lam, ...)",
    "seed": "uint64 master seed",
    "out": "output directory (optional, CLI flag wins)",
    "threads": "worker hint, results are thread-count independent",
    "quiet": "bool",
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"config error at '{path}': {message}")
        self.path = path


def _expect(d: dict, key: str, types, path: str, default=_sentinel := object()):
    if key not in d:
        if default is _sentinel:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    val = d[key]
    if types is not None and not isinstance(val, types):
        raise ConfigError(f"{path}.{key}",
                          f"expected {types}, got {type(val).__name__}")
    return val


@dataclass(frozen=True)
class OperatorConfig:
    kind: str = "dirichlet"
    dimension: int = 16
    coefficient: float = 1.0
    exponent: float = 2.0
    eigenvalues: tuple[float, ...] | None = None
    trace_exponent: float = 0.4

    @staticmethod
    def from_dict(d: dict, path: str = "operator") -> "OperatorConfig":
        kind = _expect(d, "kind", str, path, "dirichlet")
        if kind not in ("dirichlet", "power_law", "explicit"):
            raise ConfigError(f"{path}.kind", f"unknown operator kind {kind!r}")
        dim = _expect(d, "dimension", int, path, 16)
        if dim < 1:
            raise ConfigError(f"{path}.dimension", "must be >= 1")
        eig = _expect(d, "eigenvalues", list, path, None)
        trace = float(_expect(d, "trace_exponent", (int, float), path, 0.4))
        if not 0.0 < trace < 1.0:
            raise ConfigError(f"{path}.trace_exponent", "must lie in (0, 1)")
        if kind == "explicit" and eig is None:
            raise ConfigError(f"{path}.eigenvalues", "explicit operator needs a list")
        return OperatorConfig(
            kind, dim,
            float(_expect(d, "coefficient", (int, float), path, 1.0)),
            float(_expect(d, "exponent", (int, float), path, 2.0)),
            tuple(float(v) for v in eig) if eig is not None else None,
            trace)

    def build(self) -> SpectralOperator:
        if self.kind == "dirichlet":
            return dirichlet_laplacian(self.dimension, self.trace_exponent)
        if self.kind == "power_law":
            return from_growth_law(self.dimension, self.coefficient,
                                   self.exponent, self.trace_exponent)
        return SpectralOperator(np.asarray(self.eigenvalues), self.trace_exponent)


@dataclass(frozen=True)
class CoefficientConfig:
    builtin: str = "zero"
    params: dict = field(default_factory=dict)

    @staticmethod
    def from_dict(d: dict, path: str = "coefficients") -> "CoefficientConfig":
        name = _expect(d, "builtin", str, path, "zero")
        if name not in BUILTIN_NAMES:
            raise ConfigError(f"{path}.builtin",
                              f"unknown builtin {name!r}; choose from {BUILTIN_NAMES}")
        params = _expect(d, "params", dict, path, {})
        return CoefficientConfig(name, dict(params))

    def build(self, op: SpectralOperator) -> CoefficientSet:
        return builtin_coefficients(self.builtin, op, **self.params)


@dataclass(frozen=True)
class RunConfig:
    operator: OperatorConfig
    coefficients: CoefficientConfig
    experiment: dict
    seed: int = 0
    out: str | None = None
    threads: int = 1
    quiet: bool = False

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("", "config root must be a JSON object")
        op = OperatorConfig.from_dict(_expect(raw, "operator", dict, "", {}))
        cs = CoefficientConfig.from_dict(_expect(raw, "coefficients", dict, "", {}))
        exp = _expect(raw, "experiment", dict, "", {})
        _validate_experiment(exp)
        seed = _expect(raw, "seed", int, "", 0)
        if seed < 0:
            raise ConfigError("seed", "must be nonnegative")
        out = _expect(raw, "out", str, "", None)
        threads = _expect(raw, "threads", int, "", 1)
        if threads < 1:
            raise ConfigError("threads", "must be >= 1")
        quiet = _expect(raw, "quiet", bool, "", False)
        return RunConfig(op, cs, dict(exp), seed, out, threads, quiet)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["operator"]["eigenvalues"] is not None:
            d["operator"]["eigenvalues"] = list(d["operator"]["eigenvalues"])
        return d

    def build(self) -> tuple[SpectralOperator, CoefficientSet]:
        op = self.operator.build()
        return op, self.coefficients.build(op)


_POSITIVE_KEYS = ("T", "dt", "n_paths", "lam", "tol", "p", "fd_step")


def _validate_experiment(exp: dict):
    for key in _POSITIVE_KEYS:
        if key in exp and not (isinstance(exp[key], str)
                               or (isinstance(exp[key], (int, float))
                                   and exp[key] > 0)):
            raise ConfigError(f"experiment.{key}", "must be positive")
    if "lam" in exp and isinstance(exp["lam"], str) and exp["lam"] != "auto":
        raise ConfigError("experiment.lam", "must be a positive number or 'auto'")


def apply_env_overrides(raw: dict, environ=None) -> dict:
    """Overlay SPDELAB_a__b=json-value environment overrides onto a raw dict."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(raw))  # deep copy via round trip
    for key, val in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = parsed
    return out


def load_config(path: str, environ=None) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return RunConfig.from_dict(apply_env_overrides(raw, environ))
