"""Experiment configuration: YAML document, strict schema, line-aware errors."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import plants
from .pipeline import STAGE_KINDS, StageConfig, TunerConfig

Vec3 = tuple[float, float, float]


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` names the file and line."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PlantModel(_Strict):
    wheel_radius: float = Field(0.03, gt=0)
    wheel_base: float = Field(0.10, gt=0)
    wheel_speed_scale: float = Field(10.0, gt=0)
    dh: Optional[list[tuple[float, float, float, float]]] = None
    delta_t: float = Field(0.01, gt=0)
    joint_limits: Optional[list[tuple[float, float]]] = None
    home: Optional[list[float]] = None


class NoiseModel(_Strict):
    kind: Literal["gaussian", "mixture"] = "gaussian"
    sigma: float | Vec3 = 0.0
    outlier_prob: float = Field(0.1, ge=0, le=1)
    outlier_scale: float = Field(5.0, ge=0)

    @field_validator("sigma")
    @classmethod
    def _non_negative(cls, v):
        if min(v if isinstance(v, tuple) else (v,)) < 0:
            raise ValueError("sigma must be non-negative")
        return v


class ResidualModel(_Strict):
    kind: Literal["constant", "network", "analytic"]
    bias: Vec3 = (0.0, 0.0, 0.0)
    magnitude: float = Field(0.0, ge=0)
    relative_magnitude: Optional[float] = Field(None, ge=0)
    seed: int = 0
    init_scale: float = Field(1.0, ge=0)


class RealityModel(_Strict):
    residuals: list[ResidualModel] = []
    noise: NoiseModel = NoiseModel()


class TrajectoryModel(_Strict):
    kind: Literal["spin-in-place", "line-x", "circle-2d-with-chord", "circle-3d"]
    amplitude: float = Field(ge=0)
    period: float = Field(10.0, gt=0)
    duration: float = Field(60.0, gt=0)
    dt: float = Field(0.01, gt=0)
    z_amplitude: float = Field(0.03, ge=0)


class TunerModel(_Strict):
    alpha: float = Field(1.0, gt=0)
    beta: float = 2.0
    kappa: float = 0.0
    p0: float = Field(1e-2, ge=0)
    c_y: float = Field(1e-4, ge=0)
    c_v: float = Field(1e-2, ge=0)


class StageModel(_Strict):
    kind: Literal["sim-to-kin", "real-to-kin", "real-to-sim"]
    horizon: int = Field(20, ge=1)
    stride: Optional[int] = Field(None, ge=1)
    costs: Vec3 = (1.0, 1.0, 1.0)
    filter_alpha: float = Field(0.2, ge=0, le=1)
    init_scale: float = Field(0.0, ge=0)
    seed: Optional[int] = None
    tuner: TunerModel = TunerModel()
    warm_start: bool = True
    warm_start_window: int = Field(20, ge=1)
    trajectory: Optional[TrajectoryModel] = None

    @field_validator("costs")
    @classmethod
    def _positive_costs(cls, v):
        if min(v) <= 0:
            raise ValueError("costs must be strictly positive")
        return v


class RuntimeModel(_Strict):
    speedup: float = Field(20.0, gt=0)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    robot: Literal["diff-drive", "arm-6dof"]
    seed: int = 0
    plant: PlantModel = PlantModel()
    sim: RealityModel = RealityModel()
    real: RealityModel = RealityModel()
    trajectory: TrajectoryModel
    stages: list[StageModel] = Field(min_length=1)
    runtime: RuntimeModel = RuntimeModel()

    @model_validator(mode="after")
    def _consistent(self):
        kinds = [s.kind for s in self.stages]
        if len(set(kinds)) != len(kinds):
            raise ValueError("each stage kind may appear at most once")
        if kinds != sorted(kinds, key=STAGE_KINDS.index):
            raise ValueError(f"stages must follow the order {list(STAGE_KINDS)}")
        p = self.plant
        if self.robot == plants.ARM:
            if p.dh is not None and len(p.dh) != 6:
                raise ValueError("arm-6dof needs exactly six DH rows")
            if p.joint_limits is not None and len(p.joint_limits) != 6:
                raise ValueError("arm-6dof needs six joint-limit pairs")
            if p.home is not None and len(p.home) != 6:
                raise ValueError("arm-6dof home must have six joint angles")
        elif p.home is not None and len(p.home) != 3:
            raise ValueError("diff-drive home must be (x, y, theta)")
        return self

    def feasibility_errors(self) -> list[tuple[tuple, str]]:
        """(key path, message) for every trajectory the plant cannot follow."""
        params = plant_params(self)
        trajs = [(("trajectory",), self.trajectory)]
        trajs += [(("stages", i, "trajectory"), s.trajectory) for i, s in enumerate(self.stages) if s.trajectory]
        errors = []
        for path, traj in trajs:
            try:
                plants.check_trajectory_feasible(to_trajectory(traj), self.robot, params)
            except ValueError as exc:
                errors.append((path, str(exc)))
        return errors

    # -- conversions ---------------------------------------------------------

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def plant_params(cfg: ExperimentConfig):
    p = cfg.plant
    if cfg.robot == plants.DIFF_DRIVE:
        return plants.DiffDriveParams(p.wheel_radius, p.wheel_base, p.wheel_speed_scale)
    kw = {"delta_t": p.delta_t}
    if p.dh is not None:
        kw["dh"] = tuple(tuple(r) for r in p.dh)
    if p.joint_limits is not None:
        kw["joint_limits"] = tuple(tuple(r) for r in p.joint_limits)
    return plants.ArmParams(**kw)


def to_trajectory(t: TrajectoryModel) -> plants.TrajectorySpec:
    return plants.TrajectorySpec(t.kind, t.amplitude, t.period, t.duration, t.dt, t.z_amplitude)


def to_stage_config(s: StageModel, default_seed: int) -> StageConfig:
    return StageConfig(
        kind=s.kind,
        horizon=s.horizon,
        stride=s.stride if s.stride is not None else s.horizon,
        costs=tuple(s.costs),
        filter_alpha=s.filter_alpha,
        init_scale=s.init_scale,
        seed=default_seed if s.seed is None else s.seed,
        tuner=TunerConfig(**s.tuner.model_dump()),
        warm_start=s.warm_start,
        warm_start_window=s.warm_start_window,
    )


# -- loading -----------------------------------------------------------------


def _line_index(node, path=(), out=None) -> dict:
    """Map key paths to 1-based line numbers from a composed YAML tree."""
    if out is None:
        out = {}
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_index(v, path + (key,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


def _locate(lines: dict, loc: tuple) -> int:
    loc = tuple(p for p in loc if not (isinstance(p, str) and ("[" in p or p in ("tuple", "float"))))
    while loc and loc not in lines:
        loc = loc[:-1]
    return lines.get(loc, 1)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: configuration must be a mapping")
    lines = _line_index(node)
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        errors = [(tuple(e["loc"]), e["msg"]) for e in exc.errors()]
    else:
        errors = cfg.feasibility_errors()
    if errors:
        msgs = []
        for loc, msg in errors:
            where = ".".join(str(p) for p in loc) or "<root>"
            msgs.append(f"{source}:{_locate(lines, loc)}: {where}: {msg}")
        raise ConfigError("\n".join(msgs))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration: {exc.strerror}") from None
    return parse_config(text, str(path))
