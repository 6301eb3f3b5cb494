"""Pipeline configuration: one YAML document, schema-checked, with defaults.

Relative paths are resolved against the directory of the configuration file.
``default_config_yaml()`` prints every default, including the constants the
method leaves open, so each can be inspected and overridden.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .body_model import STABLE_FOOT_THRESHOLD
from .calib_sync import PEAK_WINDOW, CropHint
from .errors import ConfigError
from .geometry.raycast import LidarSpec
from .localization import LocalizationConfig
from .losses import P2M_CAP, TERM_NAMES, LossWeights
from .optimizer import Stage, StagePlan, WindowPlan

ROLES = ("wearer", "second")


@dataclass
class PathsConfig:
    """Input files and the output directory. ``truth`` is an optional directory
    of ground-truth motions used for scoring synthetic runs."""

    model: str = "model.npz"
    scene: str = "scene.npz"
    clouds: str = "clouds.npz"
    trajectory: str = "trajectory.npz"
    boxes: str | None = "boxes.jsonl"
    truth: str | None = None
    output: str = "out"


@dataclass
class PersonConfig:
    name: str = "wearer"
    role: str = "wearer"
    imu: str = "imu_wearer.npz"


def _default_persons() -> list[PersonConfig]:
    return [PersonConfig("wearer", "wearer", "imu_wearer.npz"), PersonConfig("second", "second", "imu_second.npz")]


@dataclass
class HintConfig:
    lo: list[float] = field(default_factory=lambda: [-3.0, -3.0, -2.0])
    hi: list[float] = field(default_factory=lambda: [3.0, 3.0, -1.4])
    direction: list[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])

    def crop_hint(self) -> CropHint:
        return CropHint(tuple(self.lo), tuple(self.hi), tuple(self.direction))


@dataclass
class CalibrationConfig:
    """Inputs of the map-to-world calibration from the first scan."""

    height: float = 1.7
    marker_offset: float = 0.2
    ground_hint: HintConfig = field(default_factory=HintConfig)
    marker_hint: HintConfig = field(default_factory=lambda: HintConfig([1.7, -1.2, -1.4], [2.3, 1.2, 0.4],
                                                                      [1.0, 0.0, 0.0]))
    plane_threshold: float = 0.02
    ransac_iterations: int = 500


@dataclass
class SyncConfig:
    """Jump-peak clock alignment. With ``shared_clock`` every IMU suit uses the
    clock map fitted on the wearer."""

    n_peaks: int = 2
    min_separation: float = 2.0
    peak_window: float = PEAK_WINDOW
    shared_clock: bool = True


@dataclass
class StageConfig:
    variables: list[str] = field(default_factory=lambda: ["T"])
    iterations: int = 50
    disabled_terms: list[str] = field(default_factory=list)


def _default_stages() -> list[StageConfig]:
    return [StageConfig(["T"], 50, ["p2m"]), StageConfig(["T", "R"], 40, ["p2m"]),
            StageConfig(["T", "R", "theta"], 110, [])]


@dataclass
class OptimizationConfig:
    stages: list[StageConfig] = field(default_factory=_default_stages)
    learning_rate: float = 0.001
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    window_size: int = 500
    overlap: int = 50
    boundary_mode: str = "pin_first_frame"
    anchor_weight: float = 1.0
    weights: dict[str, float] = field(default_factory=lambda: LossWeights().as_dict())
    p2m_cap: float = P2M_CAP
    hpr_radius_exponent: float = 2.0
    stable_threshold: float = STABLE_FOOT_THRESHOLD
    pen_margin: float = 0.05
    coll_margin: float = 0.05
    resample_tolerance: float = 0.02

    def stage_plan(self) -> StagePlan:
        return StagePlan([Stage(tuple(s.variables), s.iterations, tuple(s.disabled_terms)) for s in self.stages],
                         self.learning_rate, tuple(self.betas))

    def window_plan(self) -> WindowPlan:
        return WindowPlan(self.window_size, self.overlap, self.boundary_mode, self.anchor_weight)

    def loss_weights(self) -> LossWeights:
        return LossWeights.from_dict(self.weights)

    def loss_options(self) -> dict:
        return dict(p2m_cap=self.p2m_cap, hpr_radius_exponent=self.hpr_radius_exponent,
                    stable_threshold=self.stable_threshold, pen_margin=self.pen_margin,
                    coll_margin=self.coll_margin, resample_tolerance=self.resample_tolerance)


@dataclass
class SensorConfig:
    n_beams: int = 128
    fov_up: float = 22.5
    fov_down: float = -22.5
    n_columns: int = 1024
    min_range: float = 0.3
    max_range: float = 80.0

    def spec(self) -> LidarSpec:
        return LidarSpec(**dataclasses.asdict(self))


@dataclass
class EvaluationConfig:
    start_equals_end: bool = True
    plots: bool = True


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    persons: list[PersonConfig] = field(default_factory=_default_persons)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    sync: SyncConfig = field(default_factory=SyncConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    threads: int = 1
    log_level: str = "INFO"
    base_dir: str = field(default=".", metadata={"internal": True})

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def person(self, role: str) -> PersonConfig | None:
        return next((p for p in self.persons if p.role == role), None)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=False)

    def snapshot_hash(self) -> str:
        """Hash of the effective settings (paths as written, not as resolved)."""
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    def validate(self, check_paths: bool = True) -> None:
        """Check values and (optionally) that every referenced input exists.

        Raises:
            ConfigError: naming the offending field or path.
        """
        roles = [p.role for p in self.persons]
        for r in roles:
            if r not in ROLES:
                raise ConfigError(f"unknown person role {r!r} (expected one of {ROLES})")
        if roles.count("wearer") != 1:
            raise ConfigError(f"exactly one wearer is required, found {roles.count('wearer')}")
        if roles.count("second") > 1:
            raise ConfigError("at most one second person is supported")
        if len({p.name for p in self.persons}) != len(self.persons):
            raise ConfigError("person names must be unique")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not isinstance(logging.getLevelName(self.log_level.upper()), int):
            raise ConfigError(f"unknown log level {self.log_level!r}")
        try:
            self.optimization.stage_plan()
            self.optimization.window_plan()
            self.optimization.loss_weights()
            self.sensor.spec()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        for s in self.optimization.stages:
            bad = set(s.disabled_terms) - set(TERM_NAMES)
            if bad:
                raise ConfigError(f"unknown disabled terms {sorted(bad)}")
        if check_paths:
            needed = [("paths.model", self.paths.model), ("paths.scene", self.paths.scene),
                      ("paths.clouds", self.paths.clouds), ("paths.trajectory", self.paths.trajectory)]
            needed += [(f"persons[{p.name}].imu", p.imu) for p in self.persons]
            if self.person("second") is not None:
                if self.paths.boxes is None:
                    raise ConfigError("paths.boxes is required when a second person is configured")
                needed.append(("paths.boxes", self.paths.boxes))
            if self.paths.truth is not None:
                needed.append(("paths.truth", self.paths.truth))
            for name, p in needed:
                if not self.resolve(p).exists():
                    raise ConfigError(f"{name}: path does not exist: {self.resolve(p)}")


def _build(cls, data, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
        return _convert(tp, value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return {str(k): _convert(args[1], v, f"{where}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp in (int, float, str):
        if tp is not str and isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number")
        try:
            out = tp(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}") from exc
        if tp is int and out != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return out
    return value


def config_from_dict(data: dict, base_dir: str | Path = ".") -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "config")
    defaults = LossWeights().as_dict()
    defaults.update(cfg.optimization.weights)
    cfg.optimization.weights = defaults
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    """Read and schema-check a YAML configuration (paths are not checked here)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file does not exist: {path}") from exc
    return config_from_dict(data or {}, path.parent)


def default_config_yaml() -> str:
    return PipelineConfig().to_yaml()
