"""Line-oriented ``key = value`` experiment configuration.

Keys are dotted (``lattice.sites = 12``); ``#`` starts a comment.  Every key
is declared in :data:`SCHEMA`; unknown keys are rejected with their line
number.  Lists are comma separated.  ``none`` clears an optional value.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Invalid configuration text; the message names the line and key."""


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite number {text!r}")
    return v


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(_float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(_int(t) for t in text.split(",") if t.strip())


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text

    parse.options = options
    return parse


def _optional(parse):
    def wrapped(text: str):
        return None if text.lower() == "none" else parse(text)

    return wrapped


_BRANCH = {
    "kind": (_choice("gaussian", "site"), "gaussian"),
    "center": (_float, 2.0),
    "width": (_float, 0.7),
    "momentum": (_float, 0.0),
    "site": (_int, 0),
    "vacuum_particles": (_int, 0),
}

# key -> (parser, default); defaults are materialized into the persisted copy
SCHEMA: Dict[str, Tuple[Any, Any]] = {
    "name": (str, "experiment"),
    "tier": (_choice("exact", "statistical"), "exact"),
    "pipeline": (
        _choice("decoherence", "bin_width_trend", "central_limit", "scaling", "oracle"),
        "decoherence",
    ),
    "seed": (_int, 0),
    "lattice.sites": (_int, 8),
    "lattice.spacing": (_float, 1.0),
    "lattice.cap": (_int, 10**6),
    "hamiltonian.mass": (_float, 1.0),
    "hamiltonian.hbar": (_float, 1.0),
    "hamiltonian.potential": (_floats, ()),
    "hamiltonian.range": (_int, 0),
    "hamiltonian.vacuum_site": (_optional(_int), None),
    "state.particles": (_int, 2),
    "state.branches": (_int, 2),
    "state.weight_a": (_float, 1 / math.sqrt(2)),
    "state.weight_b": (_float, 1 / math.sqrt(2)),
    **{f"state.a.{k}": v for k, v in _BRANCH.items()},
    **{f"state.b.{k}": v for k, v in _BRANCH.items()},
    "observable.kind": (_choice("number", "fourier-number"), "number"),
    "observable.start": (_int, 0),
    "observable.stop": (_optional(_int), None),
    "observable.k_index": (_int, 0),
    "histories.times": (_floats, (0.5, 1.0)),
    "histories.edges": (_floats, ()),
    "histories.threshold": (_float, 0.1),
    "check.max_offdiagonal": (_optional(_float), None),
    "trend.widths": (_floats, (0.9, 1.8, 3.6, 7.2)),
    "trend.center": (_float, 0.0),
    "central.particles": (_ints, (1, 2, 3, 4, 5)),
    "central.expected_slope": (_float, -1.0),
    "central.slope_tolerance": (_float, 0.02),
    "central.closed_form_max": (_float, 1e6),
    "central.closed_form_points": (_int, 13),
    "central.closed_form_tolerance": (_float, 0.005),
    "model.dimension": (_int, 1),
    "model.box": (_float, 1000.0),
    "model.kernel": (_choice("zero", "top-hat"), "top-hat"),
    "model.relative_amplitude": (_float, 0.0),
    "model.correlation_length": (_float, 1.0),
    "volume.size": (_float, 50.0),
    "sweep.variable": (_choice("V", "L", "N"), "V"),
    "sweep.start": (_float, 20.0),
    "sweep.stop": (_float, 200.0),
    "sweep.points": (_int, 6),
    "sweep.expected_slope": (_float, -1.0),
    "sweep.slope_tolerance": (_float, 0.1),
    "oracle.volumes": (_floats, ()),
    "mc.samples": (_int, 0),
    "mc.particles": (_int, 100),
    "mc.batches": (_int, 20),
    "mc.sigmas": (_float, 3.0),
}


@dataclass
class ExperimentConfig:
    values: Dict[str, Any]
    source: Optional[str] = None
    lines: Dict[str, int] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = v
        return ExperimentConfig(vals, self.source, dict(self.lines))

    def materialize(self) -> str:
        """Canonical text with every default filled in (sorted keys)."""
        out = []
        for key in sorted(SCHEMA):
            out.append(f"{key} = {_render(self.values[key])}")
        return "\n".join(out) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.materialize().encode()).hexdigest()


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    return str(value)


def parse_config(text: str, source: Optional[str] = None) -> ExperimentConfig:
    where = source or "<config>"
    values = {k: default for k, (_, default) in SCHEMA.items()}
    lines: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}:{lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{where}:{lineno}: key {key!r} already set on line {lines[key]}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{where}:{lineno}: bad value for {key!r}: {exc}") from None
        lines[key] = lineno
    cfg = ExperimentConfig(values, source, lines)
    _check_consistency(cfg, where)
    return cfg


def _check_consistency(cfg: ExperimentConfig, where: str) -> None:
    def fail(key, msg):
        line = cfg.lines.get(key)
        loc = f"{where}:{line}" if line else where
        raise ConfigError(f"{loc}: {key}: {msg}")

    exact = ("decoherence", "bin_width_trend", "central_limit")
    if cfg["tier"] == "exact" and cfg["pipeline"] not in exact:
        fail("pipeline", f"pipeline {cfg['pipeline']!r} belongs to the statistical tier")
    if cfg["tier"] == "statistical" and cfg["pipeline"] in exact:
        fail("pipeline", f"pipeline {cfg['pipeline']!r} belongs to the exact tier")
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        fail("seed", "seed must be an unsigned 64-bit integer")
    if cfg["state.branches"] not in (1, 2):
        fail("state.branches", "must be 1 or 2")
    if cfg["sweep.points"] < 4:
        fail("sweep.points", "a scaling fit needs at least 4 points")
    if cfg["pipeline"] == "decoherence" and len(cfg["histories.edges"]) < 2:
        fail("histories.edges", "need at least two bin edges")


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
