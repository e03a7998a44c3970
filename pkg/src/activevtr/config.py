"""Scenario configuration: one JSON file per scenario, validated on load."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, field_validator, model_validator

from .cpm import CPMHyperparams
from .geometry import Pose, StereoCameraModel, so3_exp
from .sim import GaitJitter, OcclusionEvent, OdometryModel, Region, World, generate_world

CameraTag = Literal["front", "rear", "left", "right"]
BUNDLED = ("indoor", "occlusion", "four_camera")

# body: x forward, y left, z up.  camera: z optical axis, x right, y down.
_R_BODY_FROM_CAM = np.array([[0.0, 0.0, 1.0],
                             [-1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0]])
_DEFAULT_MOUNT = {"front": (0.0, (0.4, 0.0, 0.1)), "rear": (180.0, (-0.4, 0.0, 0.1)),
                  "left": (90.0, (0.0, 0.2, 0.1)), "right": (-90.0, (0.0, -0.2, 0.1))}


class ConfigError(ValueError):
    pass


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegionCfg(_Model):
    lo: List[float] = Field(min_length=3, max_length=3)
    hi: List[float] = Field(min_length=3, max_length=3)
    count: int = Field(ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("region lo must not exceed hi")
        return self


class WorldCfg(_Model):
    regions: List[RegionCfg] = Field(min_length=1)


class IntrinsicsCfg(_Model):
    fx: PositiveFloat = 400.0
    fy: PositiveFloat = 400.0
    cx: float = 320.0
    cy: float = 240.0
    baseline: PositiveFloat = 0.1
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)


class CameraCfg(_Model):
    tag: CameraTag
    yaw_deg: Optional[float] = None
    pitch_deg: float = 12.0  # downward tilt
    position: Optional[List[float]] = Field(None, min_length=3, max_length=3)
    intrinsics: IntrinsicsCfg = IntrinsicsCfg()


class RouteCfg(_Model):
    waypoints: List[List[float]] = Field(min_length=1)  # [x, y, yaw_deg]
    speed: PositiveFloat = 0.5
    yaw_rate_deg: PositiveFloat = 30.0
    body_height: float = 0.5

    @field_validator("waypoints")
    @classmethod
    def _triples(cls, v):
        if any(len(w) != 3 for w in v):
            raise ValueError("route waypoints are [x, y, yaw_deg] triples")
        return v


class OdometryCfg(_Model):
    translation_std: float = Field(0.0, ge=0)
    yaw_std: float = Field(0.0, ge=0)


class GaitCfg(_Model):
    amplitude: float = Field(0.0, ge=0)
    frequency: float = Field(0.0, ge=0)
    noise_std: float = Field(0.0, ge=0)


class NoiseCfg(_Model):
    pixel_std: PositiveFloat = 0.5
    outlier_rate: float = Field(0.0, ge=0, le=1)
    confusion_rate: float = Field(0.0, ge=0, le=1)
    odometry: OdometryCfg = OdometryCfg()
    gait: GaitCfg = GaitCfg()


class OcclusionCfg(_Model):
    camera: CameraTag
    start: float
    end: float
    fraction: float = Field(ge=0, le=1)
    repeat: Optional[int] = None


class KidnapCfg(_Model):
    time: float = Field(ge=0)
    offset: List[float] = Field(min_length=2, max_length=3)
    repeat: Optional[int] = None


class LocalizationCfg(_Model):
    gate_radius: PositiveFloat = 20.0
    ransac_iterations: int = Field(200, gt=0)
    inlier_threshold_px: PositiveFloat = 2.0
    tol: PositiveFloat = 1e-8
    max_iter: int = Field(20, gt=0)
    huber: PositiveFloat = 2.5
    prior_rot_std: PositiveFloat = 0.05
    prior_trans_std: PositiveFloat = 0.1
    min_inliers: int = Field(12, ge=3)
    min_disparity: PositiveFloat = 0.5
    reprojection_std: Optional[PositiveFloat] = None  # default: sqrt(2) * pixel_std


class KeyframeCfg(_Model):
    alpha: float = Field(0.9, gt=0, le=1)
    distance_cap: PositiveFloat = 1.0
    heading_cap_deg: PositiveFloat = 30.0


class CPMCfg(_Model):
    d_max: PositiveFloat = 2.0
    l: PositiveFloat = 0.25
    k: float = Field(2.0, ge=0)
    sigma_floor: float = Field(0.0, ge=0)


class ControllerCfg(_Model):
    gain_xy: PositiveFloat = 1.5
    gain_yaw: PositiveFloat = 1.5
    v_max: PositiveFloat = 0.5
    w_max_deg: PositiveFloat = 45.0
    waypoint_spacing: PositiveFloat = 0.2
    lookahead: int = Field(2, ge=1)


class RepeatCfg(_Model):
    flag_cooldown: float = Field(5.0, ge=0)
    orientation_threshold_deg: PositiveFloat = 30.0
    local_radius: PositiveFloat = 3.0
    lost_timeout: PositiveFloat = 10.0
    relocalization_candidates: int = Field(5, gt=0)
    max_duration_factor: PositiveFloat = 3.0
    alternate_direction: bool = False
    start_offset_std: float = Field(0.0, ge=0)


class ScenarioConfig(_Model):
    name: str = "scenario"
    seed: int = Field(0, ge=0)
    camera_rate_hz: PositiveFloat = 10.0
    world: WorldCfg
    cameras: List[CameraCfg] = Field(min_length=1, max_length=4)
    route: RouteCfg
    noise: NoiseCfg = NoiseCfg()
    occlusions: List[OcclusionCfg] = []
    kidnaps: List[KidnapCfg] = []
    localization: LocalizationCfg = LocalizationCfg()
    keyframes: KeyframeCfg = KeyframeCfg()
    cpm: CPMCfg = CPMCfg()
    controller: ControllerCfg = ControllerCfg()
    repeat: RepeatCfg = RepeatCfg()
    repeats: int = Field(1, ge=0)
    lock_camera: Optional[CameraTag] = None
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _distinct_tags(self):
        tags = [c.tag for c in self.cameras]
        if len(set(tags)) != len(tags):
            raise ValueError("camera tags must be distinct")
        for ev in self.occlusions:
            if ev.camera not in tags:
                raise ValueError(f"occlusion references unknown camera {ev.camera}")
            if ev.end < ev.start:
                raise ValueError("occlusion interval must be ordered")
        if self.lock_camera is not None and self.lock_camera not in tags:
            raise ValueError(f"lock_camera {self.lock_camera} is not on the rig")
        return self

    # -- derived runtime objects ---------------------------------------------------

    @property
    def step_dt(self) -> float:
        return 1.0 / (self.camera_rate_hz * len(self.cameras))

    def camera_models(self) -> Dict[str, StereoCameraModel]:
        out = {}
        for c in self.cameras:
            yaw, pos = _DEFAULT_MOUNT[c.tag]
            yaw = c.yaw_deg if c.yaw_deg is not None else yaw
            pos = c.position if c.position is not None else pos
            R = (so3_exp([0.0, 0.0, np.deg2rad(yaw)]) @ so3_exp([0.0, np.deg2rad(c.pitch_deg), 0.0])
                 @ _R_BODY_FROM_CAM)
            i = c.intrinsics
            out[c.tag] = StereoCameraModel(i.fx, i.fy, i.cx, i.cy, i.baseline, i.width, i.height,
                                           Pose.from_rt(R, pos, "B", "C"), c.tag)
        return out

    def build_world(self) -> World:
        return generate_world([Region(tuple(r.lo), tuple(r.hi), r.count) for r in self.world.regions],
                              self.seed)

    def odometry_model(self) -> OdometryModel:
        o = self.noise.odometry
        return OdometryModel(o.translation_std, o.yaw_std)

    def gait_jitter(self) -> GaitJitter:
        g = self.noise.gait
        return GaitJitter(g.amplitude, g.frequency, g.noise_std)

    def occlusion_events(self) -> List[OcclusionEvent]:
        return [OcclusionEvent(o.camera, o.start, o.end, o.fraction, o.repeat) for o in self.occlusions]

    def cpm_hyper(self) -> CPMHyperparams:
        return CPMHyperparams(self.cpm.d_max, self.cpm.l, self.cpm.k, self.cpm.sigma_floor)

    def keyframe_thresholds(self):
        from .teach import KeyframeThresholds
        k = self.keyframes
        return KeyframeThresholds(k.alpha, k.distance_cap, np.deg2rad(k.heading_cap_deg))

    def localization_params(self) -> "LocalizationParams":
        l = self.localization
        return LocalizationParams(l.gate_radius, l.ransac_iterations, l.inlier_threshold_px, l.tol,
                                  l.max_iter, l.huber, l.prior_rot_std, l.prior_trans_std,
                                  l.min_inliers, l.min_disparity,
                                  l.reprojection_std or np.sqrt(2.0) * self.noise.pixel_std,
                                  self.noise.confusion_rate)

    @cached_property
    def _route(self):
        return _RouteTable.build(self.route)

    def route_duration(self) -> float:
        return self._route.times[-1]

    def route_pose(self, t: float) -> Pose:
        return self._route.pose(t)


@dataclass(frozen=True)
class LocalizationParams:
    gate_radius: float = 20.0
    ransac_iterations: int = 200
    inlier_threshold_px: float = 2.0
    tol: float = 1e-8
    max_iter: int = 20
    huber: float = 2.5
    prior_rot_std: float = 0.05
    prior_trans_std: float = 0.1
    min_inliers: int = 12
    min_disparity: float = 0.5
    reprojection_std: float = 0.7  # live and keyframe pixel noise combined
    confusion_rate: float = 0.0


@dataclass(frozen=True)
class _RouteTable:
    times: np.ndarray
    xy: np.ndarray
    yaw: np.ndarray
    height: float

    @classmethod
    def build(cls, route: RouteCfg):
        wp = np.asarray(route.waypoints, dtype=float)
        xy = wp[:, :2]
        yaw = np.unwrap(np.deg2rad(wp[:, 2]))
        times = [0.0]
        for i in range(1, len(wp)):
            d = np.linalg.norm(xy[i] - xy[i - 1])
            dyaw = abs(yaw[i] - yaw[i - 1])
            times.append(times[-1] + max(d / route.speed, dyaw / np.deg2rad(route.yaw_rate_deg)))
        return cls(np.asarray(times), xy, yaw, route.body_height)

    def pose(self, t):
        t = float(np.clip(t, 0.0, self.times[-1]))
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(max(i, 0), len(self.times) - 1)
        if i == len(self.times) - 1:
            xy, yaw = self.xy[i], self.yaw[i]
        else:
            span = self.times[i + 1] - self.times[i]
            a = (t - self.times[i]) / span if span > 0 else 1.0
            xy = (1 - a) * self.xy[i] + a * self.xy[i + 1]
            yaw = (1 - a) * self.yaw[i] + a * self.yaw[i + 1]
        return Pose.from_xyz_rpy(xy[0], xy[1], self.height, yaw=yaw)


def load_config(path_or_name) -> ScenarioConfig:
    """Load a scenario from a JSON path or a bundled fixture name."""
    text = None
    p = Path(str(path_or_name))
    if p.exists():
        text = p.read_text()
    elif str(path_or_name) in BUNDLED:
        text = resources.files("activevtr.fixtures").joinpath(f"{path_or_name}.json").read_text()
    else:
        raise ConfigError(f"no such config file or bundled fixture: {path_or_name}")
    try:
        return ScenarioConfig.model_validate(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path_or_name}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
