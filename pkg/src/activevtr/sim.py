"""Synthetic world: landmark fields, stereo observations, odometry drift and gait jitter."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Pose, StereoCameraModel, compose, project_points, so3_exp


class EmptyRegionError(ValueError):
    pass


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for one noise source.

    Keys may be ints or strings; strings are hashed with crc32 so the stream
    for e.g. the rear camera does not depend on how many other cameras exist.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(words)


@dataclass(frozen=True)
class Region:
    lo: tuple
    hi: tuple
    count: int


@dataclass(frozen=True, eq=False)
class World:
    ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("landmark ids must be unique")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (isinstance(other, World) and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.positions, other.positions))

    def to_dict(self):
        return {"ids": self.ids.tolist(), "positions": self.positions.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["ids"], dtype=np.int64),
                   np.asarray(d["positions"], dtype=float).reshape(-1, 3))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_world(regions: Sequence[Region], seed: int,
                   traversed: Optional[Iterable[Region]] = None) -> World:
    """Uniformly fill each region box with exactly ``count`` landmarks.

    ``traversed`` optionally lists boxes the route passes through; each must
    overlap some region with non-zero count.
    """
    regions = list(regions)
    if traversed is not None:
        for box in traversed:
            if not any(r.count > 0 and _overlaps(box, r) for r in regions):
                raise EmptyRegionError(f"no landmarks anywhere near traversed box {box}")
    if sum(r.count for r in regions) == 0:
        raise EmptyRegionError("world description has zero landmarks")
    rng = stream(seed, "world")
    chunks = []
    for r in regions:
        lo, hi = np.asarray(r.lo, float), np.asarray(r.hi, float)
        chunks.append(lo + (hi - lo) * rng.random((r.count, 3)))
    pos = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    return World(np.arange(len(pos), dtype=np.int64), pos)


def _overlaps(a: Region, b: Region):
    return all(a.lo[i] <= b.hi[i] and b.lo[i] <= a.hi[i] for i in range(3))


@dataclass(frozen=True)
class OcclusionEvent:
    camera: str
    start: float
    end: float
    fraction_blocked: float
    repeat: Optional[int] = None  # None: applies in every repeat run

    def __post_init__(self):
        if not self.start <= self.end:
            raise ValueError("occlusion interval must satisfy start <= end")
        if not 0.0 <= self.fraction_blocked <= 1.0:
            raise ValueError("fraction_blocked must be in [0, 1]")

    def active(self, camera: str, t: float, repeat: Optional[int] = None):
        if camera != self.camera or not self.start <= t < self.end:
            return False
        return self.repeat is None or repeat is None or self.repeat == repeat


@dataclass(eq=False)
class ObservationSet:
    camera: str
    timestamp: float
    ids: np.ndarray
    pixels: np.ndarray
    pixel_std: np.ndarray
    outlier: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, mask):
        return ObservationSet(self.camera, self.timestamp, self.ids[mask], self.pixels[mask],
                              self.pixel_std[mask], self.outlier[mask])

    def to_dict(self):
        return {"camera": self.camera, "timestamp": self.timestamp, "ids": self.ids.tolist(),
                "pixels": self.pixels.tolist(), "pixel_std": self.pixel_std.tolist(),
                "outlier": self.outlier.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["camera"], float(d["timestamp"]), np.asarray(d["ids"], dtype=np.int64),
                   np.asarray(d["pixels"], dtype=float).reshape(-1, 3),
                   np.asarray(d["pixel_std"], dtype=float),
                   np.asarray(d["outlier"], dtype=bool))

    def __eq__(self, other):
        return (isinstance(other, ObservationSet) and self.camera == other.camera
                and self.timestamp == other.timestamp
                and all(np.array_equal(a, b) for a, b in zip(
                    (self.ids, self.pixels, self.pixel_std, self.outlier),
                    (other.ids, other.pixels, other.pixel_std, other.outlier))))


def in_view(world: World, body_pose: Pose, camera: StereoCameraModel):
    T_CM = compose(camera.T_BC.relabel("B", "C").inverse(), body_pose.relabel("M", "B").inverse())
    pix, valid = project_points(camera, T_CM.transform(world.positions))
    return pix, valid


def observe(world: World, body_pose: Pose, camera: StereoCameraModel,
            occlusions: Sequence[OcclusionEvent] = (), pixel_std: float = 0.0,
            outlier_rate: float = 0.0, rng: Optional[np.random.Generator] = None,
            timestamp: float = 0.0) -> ObservationSet:
    """Noisy stereo measurements of every landmark in the camera frustum.

    Draw order from ``rng`` is fixed (noise, outlier coin, outlier pixels,
    occlusion mask) so toggling one effect only changes its own draws.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    pix, valid = in_view(world, body_pose, camera)
    ids = world.ids[valid]
    pix = pix[valid]
    n = len(ids)
    noise = rng.standard_normal((n, 3))
    coin = rng.random(n)
    rand_pix = rng.random((n, 3))
    block = rng.random(n)
    meas = pix + pixel_std * noise
    outlier = coin < outlier_rate
    if outlier.any():
        u = rand_pix[:, 0] * camera.width
        v = rand_pix[:, 1] * camera.height
        ur = rand_pix[:, 2] * camera.width
        meas[outlier] = np.stack([u, v, ur], axis=1)[outlier]
    keep = np.ones(n, dtype=bool)
    for ev in occlusions:
        keep &= block >= ev.fraction_blocked
    return ObservationSet(camera.tag, float(timestamp), ids[keep], meas[keep],
                          np.full(int(keep.sum()), float(pixel_std)), outlier[keep])


@dataclass(frozen=True)
class OdometryModel:
    translation_std: float = 0.0   # m per sqrt(step), each axis
    yaw_std: float = 0.0           # rad per sqrt(step)

    def __post_init__(self):
        if self.translation_std < 0 or self.yaw_std < 0:
            raise ValueError("odometry stds must be non-negative")


def step_odometry(model: OdometryModel, true_increment: Pose, rng: np.random.Generator) -> Pose:
    """Body-frame increment as the proprioceptive estimator reports it."""
    dt = rng.standard_normal(3) * model.translation_std
    dyaw = rng.standard_normal() * model.yaw_std
    noise = Pose.from_rt(so3_exp([0.0, 0.0, dyaw]), dt, true_increment.frame_from,
                         true_increment.frame_from)
    return compose(true_increment, noise)


@dataclass(frozen=True)
class GaitJitter:
    amplitude: float = 0.0
    frequency: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        if min(self.amplitude, self.frequency, self.noise_std) < 0:
            raise ValueError("gait jitter parameters must be non-negative")

    def offset(self, t: float, rng: np.random.Generator):
        noise = rng.standard_normal(3) * self.noise_std
        noise[2] += self.amplitude * np.sin(2.0 * np.pi * self.frequency * t)
        return noise


def apply_gait_jitter(jitter: GaitJitter, nominal_pose: Pose, t: float,
                      rng: np.random.Generator) -> Pose:
    return Pose(nominal_pose.q, nominal_pose.t + jitter.offset(t, rng),
                nominal_pose.frame_to, nominal_pose.frame_from)
