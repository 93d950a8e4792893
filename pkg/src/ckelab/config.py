"""Experiment configuration: one JSON document per run, presets shipped as files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .errors import ConfigError

__all__ = ["ExperimentConfig", "load_config", "list_presets", "parse_fraction"]

DEFAULT_TOLERANCES = {
    "newton": 1e-9,
    "residual": 1e-8,
    "ricci": 1e-6,
    "kernel_zero": 1e-6,
    "kernel_gap": 1e3,
}
STRETCH = 2.0  # fixed by the moment-polytope grid; kept in the config for the record


def parse_fraction(v) -> Fraction:
    try:
        if isinstance(v, float):
            return Fraction(v).limit_denominator(10**9)
        return Fraction(str(v))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a rational number: {v!r}") from exc


@dataclass
class ExperimentConfig:
    model: str
    decomposition: dict = field(default_factory=lambda: {"type": "anticanonical"})
    eta: dict | list | None = None
    t_grid: dict = field(default_factory=lambda: {"min": 0.0, "max": 0.05, "count": 6, "spacing": "linear"})
    resolution: int = 32
    stretch: float = STRETCH
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    output: str = "out"
    seed: int = 0
    start: str = "auto"
    fields: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        tol = dict(DEFAULT_TOLERANCES)
        tol.update(self.tolerances or {})
        self.tolerances = tol
        self.validate()

    def validate(self):
        from .toric import catalog

        names = [b.name for b in catalog()]
        if not isinstance(self.model, str) or self.model.lower() not in {k.lower() for k in names}:
            raise ConfigError(f"unknown model {self.model!r}; choose from {names}")
        if not isinstance(self.resolution, int) or self.resolution < 4:
            raise ConfigError("resolution must be an integer >= 4")
        if abs(float(self.stretch) - STRETCH) > 0:
            raise ConfigError("the moment-polytope grid fixes stretch c = 2")
        for k, v in self.tolerances.items():
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"tolerance {k!r} must be positive")
        g = self.t_grid
        for key in ("min", "max", "count"):
            if key not in g:
                raise ConfigError(f"t_grid needs {key!r}")
        if g["min"] != 0:
            raise ConfigError("t_grid must start at 0")
        if g["max"] <= g["min"] or int(g["count"]) < 1:
            raise ConfigError("t_grid needs max > min and count >= 1")
        if g.get("spacing", "linear") not in ("linear", "log"):
            raise ConfigError("t_grid spacing is 'linear' or 'log'")
        if self.start not in ("auto", "reference", "ricci"):
            raise ConfigError("start is 'auto', 'reference' or 'ricci'")
        if not isinstance(self.decomposition, dict):
            raise ConfigError("decomposition must be an object with a 'type'")
        dtype = self.decomposition.get("type")
        if dtype not in ("anticanonical", "scaled", "product", "supports", "polytopes"):
            raise ConfigError(f"unknown decomposition type {dtype!r}")

    def t_values(self) -> list:
        import numpy as np

        g = self.t_grid
        n = int(g["count"])
        if n == 1:
            return [0.0]
        if g.get("spacing", "linear") == "linear":
            return [float(t) for t in np.linspace(0.0, g["max"], n)]
        tmin = float(g.get("log_min", g["max"] / 100.0))
        return [0.0] + [float(t) for t in np.geomspace(tmin, g["max"], n - 1)]

    def to_json(self) -> dict:
        return asdict(self)


def list_presets() -> list:
    return sorted(p.name[:-5] for p in resources.files("ckelab.presets").iterdir() if p.name.endswith(".json"))


def _read(path_or_name: str) -> tuple:
    p = Path(path_or_name)
    if p.is_file():
        return p.read_text(), str(p)
    name = path_or_name[:-5] if path_or_name.endswith(".json") else path_or_name
    res = resources.files("ckelab.presets") / f"{name}.json"
    if res.is_file():
        return res.read_text(), f"preset:{name}"
    raise ConfigError(f"no config file or preset named {path_or_name!r} (presets: {', '.join(list_presets())})")


def load_config(path_or_name: str, **overrides) -> ExperimentConfig:
    """Read a JSON config file or shipped preset; parse errors carry line context."""
    text, origin = _read(path_or_name)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if 0 < exc.lineno <= len(text.splitlines()) else ""
        raise ConfigError(f"{origin}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{origin}: top level must be a JSON object")
    stem = Path(origin.split(":")[-1]).name
    data.setdefault("name", stem[:-5] if stem.endswith(".json") else stem)
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    try:
        return ExperimentConfig(**data)
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
