"""Run configuration: flat ``key = value`` files with dotted key names.

Every key has a declared type and default.  Unknown keys, unparsable
values and out-of-range values are rejected with :class:`ConfigError`
before any computation starts.  Command-line overrides use the same dotted
names.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

from .errors import ConfigError
from .model import (
    ModelParams,
    SignalField,
    axisymmetric_signal,
    constant_signal,
    flat_top_signal,
    manufactured_signal,
)
from .spectral import sphere_grid

SIGNAL_KINDS = ("constant", "axisymmetric", "manufactured", "flat_top", "file")
SWEEP_KINDS = ("mass", "eps", "D")


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_diffusivity(text):
    t = str(text).strip().lower()
    if t in ("inf", "infinite", "infinity"):
        return math.inf
    return float(t)


def _parse_float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    t = str(text).strip()
    if not t:
        return []
    return [float(x) for x in t.split(",")]


_positive = lambda x: x > 0
_nonneg = lambda x: x >= 0

# key: (parser, default, check, message)
SCHEMA = {
    "model.a1": (float, 1.0, _nonneg, "must be >= 0"),
    "model.a2": (float, 1.0, _nonneg, "must be >= 0"),
    "model.a3": (float, 1.0, _positive, "must be > 0"),
    "model.a4": (float, 1.0, _positive, "must be > 0"),
    "model.a5": (float, 1.0, _positive, "must be > 0"),
    "model.a6": (float, 1.0, _positive, "must be > 0"),
    "model.D": (_parse_diffusivity, 10.0, lambda x: x >= 1, "must be >= 1 or 'infinite'"),
    "model.eps": (float, 1.0, lambda x: 0 < x <= 1, "must lie in (0, 1]"),
    "model.mass": (float, 3.0, _positive, "must be > 0"),
    "signal.kind": (str, "axisymmetric", lambda x: x in SIGNAL_KINDS, f"must be one of {SIGNAL_KINDS}"),
    "signal.kappa": (float, 0.05, _positive, "must be > 0"),
    "signal.g0": (float, 0.5, lambda x: 0 < x < 1, "must lie in (0, 1)"),
    "signal.g1": (float, 0.3, lambda x: True, ""),
    "signal.alpha_star": (float, 0.5, _positive, "must be > 0"),
    "signal.power": (int, 16, lambda x: x >= 1, "must be >= 1"),
    "signal.g_max": (float, 0.9, lambda x: 0 < x < 1, "must lie in (0, 1)"),
    "signal.depth": (float, 0.8, _nonneg, "must be >= 0"),
    "signal.a7": (float, 1.0, _positive, "must be > 0"),
    "signal.path": (str, "", lambda x: True, ""),
    "grid.L": (int, 16, lambda x: 1 <= x <= 128, "must lie in [1, 128]"),
    "grid.nr": (int, 64, lambda x: x >= 4, "must be >= 4"),
    "time.T": (float, 10.0, _nonneg, "must be >= 0"),
    "time.dt": (float, 1e-3, _positive, "must be > 0"),
    "time.dt_min": (float, 1e-6, _positive, "must be > 0"),
    "time.dt_max": (float, 1e-1, _positive, "must be > 0"),
    "time.grow": (_parse_bool, False, lambda x: True, ""),
    "time.sample_every": (float, 0.1, _positive, "must be > 0"),
    "time.snapshots": (_parse_bool, True, lambda x: True, ""),
    "steady.tol": (float, 1e-11, _positive, "must be > 0"),
    "steady.relax_T": (float, 20.0, _positive, "must be > 0"),
    "obstacle.regime": (str, "auto", lambda x: x in ("auto", "Dinf", "finite"), "must be auto, Dinf or finite"),
    "obstacle.ell": (float, 0.0, _nonneg, "must be >= 0"),
    "obstacle.mass": (float, 0.0, _nonneg, "must be >= 0 (0 uses model.mass / model.a4)"),
    "sweep.kind": (str, "mass", lambda x: x in SWEEP_KINDS, f"must be one of {SWEEP_KINDS}"),
    "sweep.values": (_parse_float_list, [], lambda x: all(v > 0 for v in x), "must be positive numbers"),
    "sweep.relative": (_parse_bool, True, lambda x: True, ""),
    "run.seed": (int, 0, _nonneg, "must be >= 0"),
}

DEFAULT_SWEEP = {
    "mass": [0.25, 0.5, 0.75, 0.9, 1.1, 1.5],
    "eps": [0.1, 0.05, 0.025],
    "D": [10.0, 100.0, 1000.0],
}


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        raw[key] = value
    return raw


def parse_overrides(items) -> dict:
    """Turn ``["model.D=inf", ...]`` into a raw mapping."""
    raw = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    return raw


@dataclass(frozen=True)
class RunConfig:
    """Resolved, validated configuration."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def as_dict(self) -> dict:
        out = {}
        for k, v in self.values.items():
            if isinstance(v, float) and math.isinf(v):
                v = "infinite"
            out[k] = v
        return out

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_(self, **changes) -> "RunConfig":
        raw = dict(self.values)
        for k, v in changes.items():
            raw[k.replace("__", ".")] = v
        return resolve(raw)

    # -- builders ---------------------------------------------------------------
    def params(self) -> ModelParams:
        v = self.values
        return ModelParams(
            a1=v["model.a1"], a2=v["model.a2"], a3=v["model.a3"], a4=v["model.a4"],
            a5=v["model.a5"], a6=v["model.a6"], D=v["model.D"], eps=v["model.eps"], mass=v["model.mass"],
        )

    def grid(self):
        return sphere_grid(self.values["grid.L"])

    def signal(self) -> SignalField:
        v = self.values
        grid = self.grid()
        a5 = v["model.a5"]
        kind = v["signal.kind"]
        if kind == "constant":
            return constant_signal(grid, v["signal.kappa"] * v["signal.a7"], a5)
        if kind == "axisymmetric":
            return axisymmetric_signal(grid, v["signal.g0"], v["signal.g1"], a5)
        if kind == "manufactured":
            return manufactured_signal(grid, v["signal.kappa"], v["signal.alpha_star"], a5)
        if kind == "flat_top":
            return flat_top_signal(grid, v["signal.power"], v["signal.g_max"], v["signal.depth"], a5)
        from .fileio import read_psf1

        field_ = read_psf1(v["signal.path"])
        if field_.L != grid.L:
            raise ConfigError(f"signal file has degree {field_.L}, grid.L is {grid.L}")
        if v["signal.a7"] != 1.0:
            field_ = field_ * v["signal.a7"]
        return SignalField.from_field(field_, a5, name=str(v["signal.path"]))

    def ell(self) -> float:
        """Coupling for the obstacle commands (0 selects the well-mixed problem)."""
        v = self.values
        regime = v["obstacle.regime"]
        if regime == "Dinf":
            return 0.0
        if v["obstacle.ell"] > 0:
            return v["obstacle.ell"]
        if regime == "finite" and math.isinf(v["model.D"]):
            raise ConfigError("obstacle.regime = finite needs obstacle.ell > 0 or a finite model.D")
        return 0.0 if math.isinf(v["model.D"]) else v["model.a6"] / v["model.D"]

    def sweep_values(self) -> list:
        vals = self.values["sweep.values"]
        return list(vals) if vals else list(DEFAULT_SWEEP[self.values["sweep.kind"]])


def resolve(raw: dict) -> RunConfig:
    """Validate a raw mapping against :data:`SCHEMA` and fill in defaults.

    Raises
    ------
    ConfigError
        Listing every unknown key and every invalid value by name.
    """
    problems = []
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        problems.append("unknown keys: " + ", ".join(unknown))
    values = {}
    for key, (parser, default, check, message) in SCHEMA.items():
        if key not in raw:
            values[key] = list(default) if isinstance(default, list) else default
            continue
        try:
            val = parser(raw[key])
        except (TypeError, ValueError) as exc:
            problems.append(f"{key}: cannot parse {raw[key]!r} ({exc})")
            continue
        if not check(val):
            problems.append(f"{key} = {raw[key]!r}: {message}")
            continue
        values[key] = val
    if not problems:
        if values["signal.kind"] == "file" and not values["signal.path"]:
            problems.append("signal.path is required when signal.kind = file")
        if values["time.dt_min"] > values["time.dt"]:
            problems.append("time.dt_min must not exceed time.dt")
        if values["signal.kind"] == "manufactured" and 8 * values["signal.kappa"] >= values["signal.alpha_star"]:
            problems.append("manufactured signal needs 8 * signal.kappa < signal.alpha_star")
        if values["signal.kind"] == "flat_top" and not values["signal.depth"] < values["signal.g_max"]:
            problems.append("signal.depth must be smaller than signal.g_max")
        if values["signal.kind"] == "axisymmetric":
            lo = values["signal.g0"] - abs(values["signal.g1"])
            hi = values["signal.g0"] + abs(values["signal.g1"])
            if not (0 < lo and hi < 1):
                problems.append("axisymmetric signal needs 0 < g0 - |g1| and g0 + |g1| < 1")
    if problems:
        raise ConfigError("; ".join(problems))
    return RunConfig(values)


def load(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional), apply ``key=value`` overrides and validate."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw.update(parse_text(fh.read(), str(path)))
    raw.update(parse_overrides(overrides))
    return resolve(raw)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.as_dict().items():
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
