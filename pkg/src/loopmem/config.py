"""Engine configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from loopmem.kdforest import EXHAUSTIVE


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    """Parameters of one run.

    Defaults are the usual values for this detector. ``t_time``
    is in seconds; with ``clock = "ops"`` processing time is counted in
    deterministic work units (indexed words plus WM locations per iteration)
    of ``ops_unit`` seconds each, which makes bounded-time runs reproducible.
    """

    t_stm: int = 30
    t_similarity: float = 0.20
    t_recent: float = 0.20
    t_nndr: float = 0.8
    t_max_features: int = 400
    t_bad: float = 0.25
    t_response: float = 0.0
    t_time: float = math.inf
    t_loop: float = 0.11
    neighborhood_range: int = 16
    gaussian_sigma: float = 1.6
    retrieval_max: int = 2
    descriptor_dim: int = 64
    nn_checks: int = 64
    nn_trees: int = 4
    rng_seed: int = 0
    clock: str = "wall"
    ops_unit: float = 1e-6
    ltm_path: str = ""

    def __post_init__(self):
        for name in ("t_similarity", "t_recent", "t_nndr", "t_bad", "t_loop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.t_stm < 1:
            raise ConfigError("t_stm must be >= 1")
        if self.neighborhood_range < 1:
            raise ConfigError("neighborhood_range must be >= 1")
        if self.t_max_features < 1 or self.descriptor_dim < 1 or self.nn_trees < 1:
            raise ConfigError("t_max_features, descriptor_dim and nn_trees must be positive")
        if self.nn_checks != EXHAUSTIVE and self.nn_checks < 1:
            raise ConfigError("nn_checks must be positive or 'exhaustive'")
        if self.retrieval_max < 0 or self.t_response < 0 or self.gaussian_sigma <= 0:
            raise ConfigError("retrieval_max, t_response must be >= 0 and gaussian_sigma > 0")
        if not self.t_time > 0:
            raise ConfigError("t_time must be > 0")
        if self.clock not in ("wall", "ops"):
            raise ConfigError(f"clock must be 'wall' or 'ops', got {self.clock!r}")

    def with_(self, **changes) -> EngineConfig:
        return replace(self, **changes)


def _parse_value(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if name == "nn_checks" and raw.lower() == "exhaustive":
            return EXHAUSTIVE
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base: EngineConfig | None = None) -> EngineConfig:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are ignored."""
    types = {f.name: type(f.default) for f in fields(EngineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, types[key], raw)
    return replace(base or EngineConfig(), **values)


def load_config(path: str | Path) -> EngineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(config: EngineConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name == "nn_checks" and v == EXHAUSTIVE:
            v = "exhaustive"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
