"""Experiment configuration: a flat ``key = value`` file with a typed schema."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

KINDS = (
    "gff-extremes",
    "sg-extremes",
    "coupling-xcheck",
    "decomposition-audit",
    "polchinski-residual",
    "level-set-growth",
    "near-maxima-geometry",
)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _radius(text: str):
    t = text.strip().lower()
    return "default" if t == "default" else float(t)


# key -> (parser, default); a default of None means "required or derived"
SCHEMA = {
    "kind": (str, None),
    "seed": (int, None),
    "n": (int, None),
    "mass_sq": (float, 1.0),
    "z": (float, 0.0),
    "beta": (float, math.pi),
    "s": (float, 0.1),
    "r": (_radius, "default"),
    "samples": (int, 100),
    "output": (str, "runs"),
    "workers": (int, 1),
    "save_fields": (_bool, False),
    "mode": (str, ""),
    # extraction and height statistics
    "h0": (float, -1.0),
    "h1": (float, -0.8),
    "threshold": (float, -1.0),
    "compare_n": (int, 0),
    "replicates": (int, 1),
    # MALA
    "chains": (int, 8),
    "step_size": (float, 0.1),
    "burn_in": (int, 500),
    "thin": (int, 10),
    # flow and potential
    "T": (float, 0.0),
    "dt": (float, 0.01),
    "mc_samples": (int, 64),
    "s_marks": (_floats, (0.4, 0.2, 0.1, 0.05)),
    "z_list": (_floats, ()),
    "n_list": (_ints, ()),
    "s_list": (_floats, ()),
    "t_list": (_floats, (0.1, 0.5, 1.0)),
    "batches": (int, 20),
    "quadrature_order": (int, 0),
    "fd_step": (float, 1e-5),
    "configurations": (int, 10),
    # level sets and geometry
    "lambda": (float, 3.0),
    "lambda_grid": (_floats, (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)),
    "r_list": (_floats, (4.0, 8.0, 16.0)),
    "r_lattice": (int, 8),
    "kappa": (float, 0.5),
}


# where and how a run executes; these never change its results
EXECUTION_KEYS = ("output", "workers")


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def kind(self) -> str:
        return self.values["kind"]

    def echo(self) -> dict:
        """Plain-JSON view of every resolved key."""
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        """Canonical text of every key that can affect results."""

        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(repr(x) for x in v)
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v) if isinstance(v, float) else str(v)

        return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(self.values.items()) if k not in EXECUTION_KEYS)


def parse_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        if k in raw:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        raw[k] = v
    return raw


def build(raw: dict[str, str], overrides=()) -> ExperimentConfig:
    raw = dict(raw)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        k, v = (p.strip() for p in ov.split("=", 1))
        raw[k] = v
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    vals = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                vals[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        elif default is not None:
            vals[key] = default
    validate(vals)
    return ExperimentConfig(vals)


def validate(v: dict) -> None:
    for key in ("kind", "seed", "n"):
        if key not in v:
            raise ConfigError(f"missing required key {key!r}")
    if v["kind"] not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}")
    n = v["n"]
    if not (2 <= n <= 1024 and n & (n - 1) == 0):
        raise ConfigError("n must be a power of two in [2, 1024]")
    for m in v["n_list"]:
        if not (2 <= m <= 1024 and m & (m - 1) == 0):
            raise ConfigError("n_list entries must be powers of two in [2, 1024]")
    if not 0 < v["beta"] < 6 * math.pi:
        raise ConfigError("beta out of range (0, 6π)")
    if not v["mass_sq"] > 0:
        raise ConfigError("mass_sq must be positive")
    if v["seed"] < 0:
        raise ConfigError("seed must be non-negative")
    if v["samples"] < 1 or v["workers"] < 1 or v["chains"] < 1:
        raise ConfigError("samples, workers and chains must be >= 1")
    r = v["r"]
    if r != "default" and not r >= 0:
        raise ConfigError("r must be 'default' or a non-negative number")
    if not v["h1"] > v["h0"]:
        raise ConfigError("need h1 > h0")
    if not v["s"] > 0:
        raise ConfigError("s must be positive")


def load(path, overrides=()) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return build(parse_text(text), overrides)
