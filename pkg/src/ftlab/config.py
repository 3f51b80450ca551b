"""Experiment configuration: TOML files with dotted keys plus ``--set`` overrides.

Every experiment reads one namespace (``density.*`` for
``density-envelope`` and so on).  A file may carry several namespaces; keys
outside the schema are rejected with their full dotted path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional

import tomli

from .errors import ConfigError
from .fields import DRIFTS, INITIAL_DATA

EXPERIMENTS = {
    "fbm-validate": "fbm",
    "flow-roundtrip": "flow",
    "weak-residual": "weak",
    "malliavin-bounds": "malliavin",
    "density-envelope": "density",
    "explicit-density": "explicit",
}


@dataclass(frozen=True)
class Param:
    kind: str
    default: Any
    check: Optional[Callable[[Any], Optional[str]]] = None


def _range(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        vals = v if isinstance(v, (list, tuple)) else [v]
        for x in vals:
            if not isinstance(x, (int, float)) or not math.isfinite(x):
                return "must be finite"
            if (x < lo or (lo_open and x == lo)) or (x > hi or (hi_open and x == hi)):
                a = "(" if lo_open else "["
                b = ")" if hi_open else "]"
                return f"must lie in {a}{lo}, {hi}{b}"
        return None
    return check


def _choice(options):
    def check(v):
        return None if v in options else f"must be one of {sorted(options)}"
    return check


HURST = _range(0.0, 1.0, True, True)
HURST_HALF = _range(0.5, 1.0, False, True)
POS = _range(0.0, math.inf, True, False)
PROB = _range(0.0, 1.0, True, True)


def _count(lo=1, hi=10**8):
    return _range(lo, hi)


def _levels(v):
    if not v or any(not 1 <= j <= 16 for j in v):
        return "levels must be exponents in [1, 16]"
    if list(v) != sorted(set(v)):
        return "levels must be strictly increasing"
    return None


def _planar(v):
    if len(v) != 2:
        return "expected exactly two coordinates"
    return _range(-1e6, 1e6)(v)


SCHEMA: dict[str, dict[str, Param]] = {
    "fbm": {
        "H": Param("floats", [0.3, 0.5, 0.75, 0.9], HURST),
        "t_end": Param("float", 1.0, POS),
        "n_steps": Param("int", 256, _count(1, 1 << 16)),
        "n_paths": Param("int", 10_000, _count(2)),
        "method": Param("str", "cholesky", _choice({"cholesky", "circulant", "volterra"})),
        "se_threshold": Param("float", 3.0, POS),
        "seed": Param("int", 0, _count(0, 2**63)),
    },
    "flow": {
        "H": Param("floats", [0.5, 0.75], HURST),
        "drift": Param("str", "sin", _choice(set(DRIFTS) - {"rotation-2d"})),
        "t_end": Param("float", 1.0, POS),
        "n_steps": Param("int", 4096, _count(1, 1 << 20)),
        "n_points": Param("int", 16, _count(1, 10**6)),
        "x_range": Param("float", 2.0, POS),
        "rtol": Param("float", 1e-8, POS),
        "roundtrip_tol": Param("float", 1e-4, POS),
        "seed": Param("int", 0, _count(0, 2**63)),
    },
    "weak": {
        "H": Param("float", 0.75, HURST),
        "drift": Param("str", "sin", _choice(set(DRIFTS) - {"rotation-2d"})),
        "u0": Param("str", "bump", _choice(set(INITIAL_DATA))),
        "t_end": Param("float", 1.0, POS),
        "levels": Param("ints", [9, 10, 11, 12], _levels),
        "eps_multiple": Param("int", 4, _count(4, 1 << 16)),
        "n_x": Param("int", 401, _count(5, 10**6)),
        "n_paths": Param("int", 12, _count(1, 10**5)),
        "test_center": Param("float", 0.0, _range(-1e6, 1e6)),
        "test_radius": Param("float", 1.0, POS),
        "rel_tol": Param("float", 1e-2, POS),
        "seed": Param("int", 0, _count(0, 2**63)),
    },
    "malliavin": {
        "H": Param("floats", [0.5, 0.75], HURST_HALF),
        "drift": Param("str", "sin", _choice(set(DRIFTS) - {"rotation-2d"})),
        "t": Param("float", 1.0, POS),
        "x": Param("float", 0.3, _range(-1e6, 1e6)),
        "n_steps": Param("int", 1024, _count(1, 1 << 16)),
        "n_paths": Param("int", 1000, _count(1)),
        "seed": Param("int", 0, _count(0, 2**63)),
    },
    "density": {
        "drift": Param("str", "sin", _choice(set(DRIFTS) - {"rotation-2d"})),
        "u0": Param("str", "arctan-shift", _choice({"identity", "arctan-shift"})),
        "H": Param("float", 0.5, HURST_HALF),
        "t": Param("float", 1.0, POS),
        "x": Param("float", 0.0, _range(-1e6, 1e6)),
        "n_steps": Param("int", 256, _count(1, 1 << 16)),
        "n_samples": Param("int", 100_000, _count(2)),
        "n_coupled": Param("int", 1000, _count(1)),
        "n_bootstrap": Param("int", 200, _count(10)),
        "band_level": Param("float", 0.99, PROB),
        "central_width": Param("float", 2.0, POS),
        "reference_tol": Param("float", 0.01, POS),
        "seed": Param("int", 0, _count(0, 2**63)),
    },
    "explicit": {
        "t": Param("float", 1.0, POS),
        "x": Param("floats", [1.0, 0.5], _planar),
        "n_samples": Param("int", 100_000, _count(10)),
        "n_steps": Param("int", 256, _count(1, 1 << 16)),
        "grid_points": Param("int", 32, _count(2, 4096)),
        "grid_halfwidth": Param("float", 4.0, POS),
        "u0_matrix": Param("matrix", None, None),
        "analytic_tol": Param("float", 1e-8, POS),
        "kde_tol": Param("float", 0.02, POS),
        "seed": Param("int", 0, _count(0, 2**63)),
    },
}


def _coerce(key: str, p: Param, v):
    def bad(msg):
        return ConfigError(key, msg)

    if p.kind == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise bad(f"expected a number, got {v!r}")
        return float(v)
    if p.kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise bad(f"expected an integer, got {v!r}")
        return v
    if p.kind == "str":
        if not isinstance(v, str):
            raise bad(f"expected a string, got {v!r}")
        return v
    if p.kind in ("floats", "ints"):
        vals = v if isinstance(v, list) else [v]
        out = []
        for x in vals:
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise bad(f"expected numbers, got {x!r}")
            if p.kind == "ints" and not isinstance(x, int):
                raise bad(f"expected integers, got {x!r}")
            out.append(float(x) if p.kind == "floats" else x)
        return out
    if p.kind == "matrix":
        if v is None:
            return None
        ok = (isinstance(v, list) and len(v) == 2
              and all(isinstance(r, list) and len(r) == 2 for r in v)
              and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                      for r in v for x in r))
        if not ok:
            raise bad("expected a 2x2 array of numbers")
        if v[0][0] * v[1][1] - v[0][1] * v[1][0] == 0:
            raise bad("matrix is singular")
        return [[float(x) for x in r] for r in v]
    raise AssertionError(p.kind)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(raw: str):
    """TOML scalar/array syntax; anything unparseable is taken as a bare string."""
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    return key.strip(), parse_value(raw.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    values: dict

    @property
    def namespace(self) -> str:
        return EXPERIMENTS[self.experiment]

    def __getitem__(self, name: str):
        return self.values[name]

    def echo(self) -> dict:
        return {"experiment": self.experiment,
                **{f"{self.namespace}.{k}": v for k, v in sorted(self.values.items())}}


def load_config(experiment: str, path=None, overrides=()) -> ExperimentConfig:
    """Merge defaults, the TOML file at ``path`` and ``key=value`` overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {experiment!r}")
    flat: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                flat.update(_flatten(tomli.load(fh)))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
    for item in overrides:
        k, v = parse_override(item) if isinstance(item, str) else item
        flat[k] = v

    declared = flat.pop("experiment", experiment)
    if declared != experiment:
        raise ConfigError("experiment", f"file declares {declared!r}, running {experiment!r}")
    ns = EXPERIMENTS[experiment]
    values = {name: p.default for name, p in SCHEMA[ns].items()}
    for key, v in flat.items():
        head, _, name = key.partition(".")
        if head not in SCHEMA or name not in SCHEMA[head]:
            raise ConfigError(key, "unknown key")
        p = SCHEMA[head][name]
        v = _coerce(key, p, v)
        if p.check is not None and v is not None:
            msg = p.check(v)
            if msg:
                raise ConfigError(key, msg)
        if head == ns:
            values[name] = v
    return ExperimentConfig(experiment, values)
