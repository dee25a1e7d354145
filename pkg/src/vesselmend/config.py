"""Pipeline configuration: every tunable in one JSON-serializable record.

The configuration nests the parameter dataclasses that the library
modules already define (candidate gates, walk knobs) next to small
records for the oracle, the contour stage, and the tube assembly, so a
single file pins a full experiment. Parsing rejects unknown keys, and a
round trip through ``to_dict``/``from_dict`` is the identity.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .reconnect import CandidateParams, NeighborLevel, WalkParams

__all__ = [
    "ConfigError",
    "OracleConfig",
    "LumenConfig",
    "ReconstructConfig",
    "PipelineConfig",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Malformed configuration data (unknown key or bad value)."""


@dataclass(frozen=True)
class OracleConfig:
    """Vesselness-probability model selection and its training knobs."""

    kind: str = "linear_patch"
    patch_big: int = 15
    patch_small: int = 7
    epochs: int = 200
    learning_rate: float = 0.5
    l2: float = 3e-2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("linear_patch", "intensity_percentile"):
            raise ConfigError(f"unknown oracle kind {self.kind!r}")


@dataclass(frozen=True)
class LumenConfig:
    """Cross-section extraction and contour-growth knobs."""

    ray_policy: int | str = 20
    section_size: tuple[int, int] = (64, 64)
    pixel_spacing: float | None = None
    count_policy: int | str = "15x"

    def __post_init__(self) -> None:
        object.__setattr__(self, "section_size", tuple(self.section_size))


@dataclass(frozen=True)
class ReconstructConfig:
    """Tube-model assembly and voxelization knobs."""

    support_scale: float = 1.5
    iso: float = 0.0
    min_stations: int = 2


@dataclass(frozen=True)
class PipelineConfig:
    """Aggregated tunables for the reconnect/reconstruct/metrics flow."""

    seed: int = 0
    threads: int = 1
    nsdt_amplification: float = 5.0
    loss_alpha: float = 0.5
    soft_skeleton_iterations: int = 10
    opening_patch: int = 11
    enabled_types: tuple[int, ...] = (1, 2, 3)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    candidates: CandidateParams = field(default_factory=CandidateParams)
    walk: WalkParams = field(default_factory=WalkParams)
    lumen: LumenConfig = field(default_factory=LumenConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "enabled_types", tuple(self.enabled_types))
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if not set(self.enabled_types) <= {1, 2, 3}:
            raise ConfigError(f"enabled_types must be within (1, 2, 3), got {self.enabled_types}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["walk"]["neighbor_level"] = self.walk.neighbor_level.value
        out["enabled_types"] = list(self.enabled_types)
        out["lumen"]["section_size"] = list(self.lumen.section_size)
        return out

    def with_overrides(self, overrides: dict[str, Any]) -> "PipelineConfig":
        """New config with dotted-path overrides applied (flags win)."""
        cfg = self
        for dotted, value in overrides.items():
            if value is None:
                continue
            head, _, rest = dotted.partition(".")
            if rest:
                sub = getattr(cfg, head, None)
                if sub is None or not dataclasses.is_dataclass(sub):
                    raise ConfigError(f"unknown config group {head!r}")
                if rest not in {f.name for f in fields(sub)}:
                    raise ConfigError(f"unknown config key {dotted!r}")
                if rest == "neighbor_level" and isinstance(value, str):
                    value = NeighborLevel(value)
                sub = dataclasses.replace(sub, **{rest: value})
                cfg = dataclasses.replace(cfg, **{head: sub})
            else:
                if head not in {f.name for f in fields(cfg)}:
                    raise ConfigError(f"unknown config key {dotted!r}")
                cfg = dataclasses.replace(cfg, **{head: value})
        return cfg


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return data


def from_dict(data: dict) -> PipelineConfig:
    """Parse a config dictionary, rejecting unknown keys at any level."""
    data = dict(_build(PipelineConfig, data, "config"))
    if "oracle" in data:
        data["oracle"] = OracleConfig(**_build(OracleConfig, data["oracle"], "oracle"))
    if "candidates" in data:
        data["candidates"] = CandidateParams(
            **_build(CandidateParams, data["candidates"], "candidates")
        )
    if "walk" in data:
        walk = dict(_build(WalkParams, data["walk"], "walk"))
        if isinstance(walk.get("neighbor_level"), str):
            try:
                walk["neighbor_level"] = NeighborLevel(walk["neighbor_level"])
            except ValueError as exc:
                raise ConfigError(f"walk: bad neighbor_level {walk['neighbor_level']!r}") from exc
        data["walk"] = WalkParams(**walk)
    if "lumen" in data:
        data["lumen"] = LumenConfig(**_build(LumenConfig, data["lumen"], "lumen"))
    if "reconstruct" in data:
        data["reconstruct"] = ReconstructConfig(
            **_build(ReconstructConfig, data["reconstruct"], "reconstruct")
        )
    if "enabled_types" in data:
        data["enabled_types"] = tuple(int(t) for t in data["enabled_types"])
    try:
        return PipelineConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> PipelineConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(data)


def save_config(cfg: PipelineConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
