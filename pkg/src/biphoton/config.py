"""Experiment configuration documents (JSON).

Every section maps onto one dataclass; unknown keys and out-of-range values
raise :class:`ConfigError` naming the offending field path, e.g.
``camera.qe: qe must lie in [0, 1], got 1.5``.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .core import CalibrationConfig, Plane
from .correlator import CorrelationJob
from .estimator import FitRegion
from .simulator import CameraConfig, OpticsSimConfig, SourceConfig, config_hash


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ControlConfig:
    """Matched-flux control run: downstream transmission ``eta`` with the pump raised by 1/eta."""

    eta: float = 10 ** (-0.6)
    pump_compensation: bool = True

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta!r}")


@dataclass(frozen=True)
class StackPaths:
    """Pre-recorded stacks to load instead of simulating."""

    image: str | None = None
    pupil: str | None = None
    image_control: str | None = None
    pupil_control: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    optics: OpticsSimConfig = field(default_factory=OpticsSimConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    correlation: CorrelationJob = field(default_factory=CorrelationJob)
    fit_region: FitRegion = field(default_factory=FitRegion)
    n_frames: int = 300
    plane: Plane = Plane.IMAGE
    master_seed: int = 0
    control: ControlConfig | None = None
    stacks: StackPaths | None = None

    def __post_init__(self):
        object.__setattr__(self, "plane", Plane.parse(self.plane))
        if int(self.n_frames) != self.n_frames or self.n_frames < 1:
            raise ValueError(f"n_frames must be an integer >= 1, got {self.n_frames!r}")
        if self.n_frames <= self.correlation.background_lag:
            raise ValueError(
                f"n_frames ({self.n_frames}) must exceed correlation.background_lag ({self.correlation.background_lag})"
            )
        crop = self.correlation.resolve_crop((self.camera.height, self.camera.width))
        if self.fit_region.diameter / 2.0 > crop // 2 + 0.5:
            raise ValueError(f"fit_region.diameter {self.fit_region.diameter} does not fit in the {crop}px crop")

    @property
    def calibration(self) -> CalibrationConfig:
        return self.optics.calibration

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if hasattr(obj, "value") and isinstance(obj, str):
        return obj.value
    return obj


def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def build(cls, data, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, validating recursively."""
    where = path or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        tp = _strip_optional(hints[name])
        if dataclasses.is_dataclass(tp) and value is not None:
            kwargs[name] = build(tp, value, sub)
        else:
            _check_scalar(tp, value, sub)
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{_blame(str(exc), path, names)}: {exc}") from None


def _check_scalar(tp, value, path):
    if value is None:
        return
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if tp in (int, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if tp is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{path}: expected an integer, got {value!r}")


def _blame(message: str, path: str, names) -> str:
    # pick the field the validator complained about, else the section itself
    for name in sorted(names, key=len, reverse=True):
        if message.startswith(name) or f" {name} " in message or message.startswith(f"{name}."):
            return f"{path}.{name}" if path else name
    for name in sorted(names, key=len, reverse=True):
        if name in message:
            return f"{path}.{name}" if path else name
    return path or "<root>"


def parse_config(data: dict) -> ExperimentConfig:
    return build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(data)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
