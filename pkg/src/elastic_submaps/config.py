"""Atlas configuration and its flat ``key = value`` file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .occupancy import DEFAULT_RESOLUTION, LogOddsParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AtlasConfig:
    r_voxel: float = DEFAULT_RESOLUTION
    r_filter: float = 0.25
    d_spawn: float = 20.0
    lambda_spawn: float = 0.75
    lambda_fusion: float = 0.5
    lambda_uncertainty: float = 0.05
    range_min: float = 0.5
    range_max: float = 60.0
    l_hit: float = 0.85
    l_miss: float = -0.4
    l_occ: float = 1.5
    l_free: float = -1.5
    l_min: float = -5.0
    l_max: float = 5.0
    # spawn / fusion triggers; "baseline" keeps only distance spawning and
    # loop-closure-ends fusion
    cloud_overlap_spawn: bool = True
    distance_spawn: bool = True
    spawn_distance: str = "euclidean"  # or "travel" (path length since the root node)
    overlap_fusion: bool = True
    uncertainty_gate: bool = True

    def __post_init__(self):
        for name in ("r_voxel", "r_filter", "d_spawn", "lambda_uncertainty", "range_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.range_min < 0 or self.range_min >= self.range_max:
            raise ConfigError("need 0 <= range_min < range_max")
        for name in ("lambda_spawn", "lambda_fusion"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.spawn_distance not in ("travel", "euclidean"):
            raise ConfigError("spawn_distance must be 'travel' or 'euclidean'")
        try:
            self.log_odds
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def log_odds(self) -> LogOddsParams:
        return LogOddsParams(self.l_hit, self.l_miss, self.l_occ, self.l_free, self.l_min, self.l_max)

    def for_mode(self, mode: str) -> AtlasConfig:
        if mode == "proposed":
            return replace(self, cloud_overlap_spawn=True, distance_spawn=True,
                           overlap_fusion=True, uncertainty_gate=True)
        if mode == "baseline":
            return replace(self, cloud_overlap_spawn=False, distance_spawn=True,
                           overlap_fusion=False, uncertainty_gate=False)
        raise ConfigError(f"unknown mode {mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, base: AtlasConfig | None = None) -> AtlasConfig:
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(types[key], val, lineno)
        return replace(base or cls(), **values)

    @classmethod
    def load(cls, path) -> AtlasConfig:
        return cls.from_text(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(type_name: str, val: str, lineno: int):
    try:
        if type_name == "bool":
            low = val.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(val)
        if type_name == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: bad {type_name} value {val!r}") from None
