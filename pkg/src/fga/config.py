"""Flat ``key = value`` experiment configuration files.

Lines starting with ``#`` and trailing ``# ...`` comments are ignored. Lists are
comma separated; numbers may be written as fractions such as ``1/64``. Unknown
keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from ._validation import ConfigError

EXPERIMENT_NAMES = ("roundtrip", "convergence", "counterexample", "diagnostics")


def _number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def _numbers(text: str) -> tuple:
    return tuple(_number(t) for t in text.split(",") if t.strip())


def _boolean(text: str) -> bool:
    key = text.strip().lower()
    if key in ("true", "yes", "1", "on"):
        return True
    if key in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    """Settings of one experiment run; see ``docs/config.md`` for every key."""

    experiment: str
    system: str = "twobranch1d"
    c0: float = 1.0
    amplitude: float = 0.0
    wavenumber: float = 1.0
    eps: tuple = (1 / 64, 1 / 128, 1 / 256)
    delta: float = 0.5
    K: int = 1
    T: float = 0.5
    dt: float | None = None
    c_g: float = 0.5
    r_cut: float = 8.0
    prune_tol: float = 1e-12
    p0: tuple = (1.25,)
    width: float = 0.3
    box: float = 6.0
    points_per_sqrt_eps: float = 4.0
    points_per_wavelength: float = 16.0
    seed: int = 0
    trials: int = 4
    timing: bool = False
    csv: str = "results.csv"
    summary: str = "summary.jsonl"
    threads: int | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_NAMES:
            raise ConfigError(f"experiment must be one of {EXPERIMENT_NAMES}, got {self.experiment!r}")
        if self.K not in (1, 2):
            raise ConfigError("K must be 1 or 2")
        if len(self.eps) == 0:
            raise ConfigError("eps list is empty")
        if any(e <= 0 for e in self.eps):
            raise ConfigError("eps values must be positive")
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ConfigError("eps list must be strictly decreasing")
        positive = ["delta", "c_g", "r_cut", "prune_tol", "width", "box", "points_per_sqrt_eps", "points_per_wavelength", "trials"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.T < 0:
            raise ConfigError("T must be non-negative")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.c0 <= 0 or self.wavenumber <= 0:
            raise ConfigError("c0 and wavenumber must be positive")

    @property
    def system_params(self) -> dict:
        if self.system.lower() == "twobranch1d":
            return {"c0": self.c0, "amplitude": self.amplitude, "wavenumber": self.wavenumber}
        return {}


_PARSERS = {
    "experiment": str,
    "system": str,
    "c0": _number,
    "amplitude": _number,
    "wavenumber": _number,
    "eps": _numbers,
    "delta": _number,
    "K": lambda s: int(_number(s)),
    "T": _number,
    "dt": _number,
    "c_g": _number,
    "r_cut": _number,
    "prune_tol": _number,
    "p0": _numbers,
    "width": _number,
    "box": _number,
    "points_per_sqrt_eps": _number,
    "points_per_wavelength": _number,
    "seed": lambda s: int(_number(s)),
    "trials": lambda s: int(_number(s)),
    "timing": _boolean,
    "csv": str,
    "summary": str,
    "threads": lambda s: int(_number(s)),
}

_DEFAULTS = {
    "counterexample": {"system": "acoustic2d", "eps": (1e-2, 1e-3, 1e-4), "T": 1.0},
    "diagnostics": {"system": "acoustic2d", "eps": (1 / 16,), "T": 1.0, "dt": 1e-2, "p0": (1.0, 0.0)},
}


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse configuration text; ``experiment`` overrides the ``experiment`` key."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _PARSERS[key](val)
    if experiment is not None:
        if "experiment" in values and values["experiment"] != experiment:
            raise ConfigError(f"config is for {values['experiment']!r}, not {experiment!r}")
        values["experiment"] = experiment
    if "experiment" not in values:
        raise ConfigError("no experiment given")
    merged = dict(_DEFAULTS.get(values["experiment"], {}))
    merged.update(values)
    return ExperimentConfig(**merged)


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    if not any(line.split("#", 1)[0].strip() for line in text.splitlines()):
        raise ConfigError(f"config file {path} is empty")
    return parse_config(text, experiment)


def config_keys() -> list:
    return [f.name for f in fields(ExperimentConfig)]
