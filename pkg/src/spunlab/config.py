"""Versioned run configuration shared by all CLI commands."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .airflow import DomainGeometry, TurbulenceConfig
from .bnn import BnnSpec
from .doe import AIR_SPEED_LEVELS, CENTER_PROCESS, DEFAULT_RANGES, MATERIAL_LEVELS, PRESSURE_LEVELS, ParamRange
from .errors import ValidationError, require_nonnegative, require_positive
from .fiber import SimulationConfig
from .laydown import TailPolicy

__all__ = ["RunConfig", "DoeConfig", "ProcessDefaults", "AnalysisConfig", "load_config", "CONFIG_SCHEMA"]

CONFIG_SCHEMA = "spunlab.config/1"


@dataclass(frozen=True)
class ProcessDefaults:
    """Process values that the DoE does not vary."""

    belt_speed: float = 2.0  # m/s
    spin_speed: float = 80.0  # m/s

    def validate(self):
        require_nonnegative("process.belt_speed", self.belt_speed)
        require_positive("process.spin_speed", self.spin_speed)
        return self


@dataclass(frozen=True)
class DoeConfig:
    n1: int = 100
    n2: int = 105
    air_speeds: tuple = AIR_SPEED_LEVELS
    pressures: tuple = PRESSURE_LEVELS
    levels: tuple = MATERIAL_LEVELS
    center: tuple = CENTER_PROCESS

    def validate(self):
        if self.n1 < 0 or self.n2 < 0:
            raise ValidationError("doe.n1", "sizes must be >= 0")
        if self.n1 + self.n2 == 0:
            raise ValidationError("doe.n1", "n1 + n2 must be > 0")
        return self


@dataclass(frozen=True)
class AnalysisConfig:
    cv_folds: int = 5
    effect_grid: int = 41
    baseline: float = 0.5  # normalized value of the inputs held fixed
    ci_level: float = 0.95

    def validate(self):
        if self.cv_folds < 2:
            raise ValidationError("analysis.cv_folds", "must be >= 2")
        if self.effect_grid < 2:
            raise ValidationError("analysis.effect_grid", "must be >= 2")
        if not 0.0 < self.ci_level < 1.0:
            raise ValidationError("analysis.ci_level", "must lie in (0, 1)")
        return self


_SECTIONS = {
    "geometry": DomainGeometry,
    "turbulence": TurbulenceConfig,
    "process": ProcessDefaults,
    "simulation": SimulationConfig,
    "tail": TailPolicy,
    "doe": DoeConfig,
    "bnn": BnnSpec,
    "analysis": AnalysisConfig,
}


@dataclass(frozen=True)
class RunConfig:
    geometry: DomainGeometry = field(default_factory=DomainGeometry)
    turbulence: TurbulenceConfig = field(default_factory=TurbulenceConfig)
    process: ProcessDefaults = field(default_factory=ProcessDefaults)
    ranges: tuple = DEFAULT_RANGES
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    tail: TailPolicy = field(default_factory=TailPolicy)
    doe: DoeConfig = field(default_factory=DoeConfig)
    bnn: BnnSpec = field(default_factory=BnnSpec)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0

    def validate(self):
        for name in _SECTIONS:
            getattr(self, name).validate()
        for r in self.ranges:
            r.validate()
        names = [r.name for r in self.ranges]
        if len(set(names)) != len(names):
            raise ValidationError("ranges", "duplicate range names")
        return self

    def to_dict(self):
        d = {"schema": CONFIG_SCHEMA}
        for name in _SECTIONS:
            d[name] = _plain(asdict(getattr(self, name)))
        d["ranges"] = [asdict(r) for r in self.ranges]
        d["seed"] = self.seed
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def config_hash(self):
        """Short sha256 over the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValidationError("schema", f"expected {CONFIG_SCHEMA}, got {schema!r}")
        kw = {}
        for key, value in d.items():
            if key in _SECTIONS:
                kw[key] = _section(key, _SECTIONS[key], value)
            elif key == "ranges":
                kw[key] = _ranges(value)
            elif key == "seed":
                if not isinstance(value, int):
                    raise ValidationError("seed", "must be an integer")
                kw[key] = value
            else:
                raise ValidationError(key, "unknown configuration key")
        return cls(**kw).validate()


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(name, cls, value):
    if not isinstance(value, dict):
        raise ValidationError(name, "must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in value.items():
        if k not in known:
            raise ValidationError(f"{name}.{k}", "unknown configuration key")
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(name, str(exc)) from None


def _ranges(value):
    if not isinstance(value, list):
        raise ValidationError("ranges", "must be a list")
    out = []
    for i, r in enumerate(value):
        try:
            out.append(ParamRange(**r))
        except TypeError as exc:
            raise ValidationError(f"ranges[{i}]", str(exc)) from None
    return tuple(out)


def load_config(path=None):
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError("config", f"invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ValidationError("config", "top level must be a mapping")
    return RunConfig.from_dict(d)
