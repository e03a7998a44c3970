"""Teach step: topo-metric keyframe map and per-camera performance samples."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .cpm import CPMEntry, CPMHyperparams
from .geometry import (Pose, StereoCameraModel, compose, rotation_angle, translation_distance,
                       triangulate_points)
from .localization import (Correspondences, MapPointSet, Prior, ReprojectionNoise,
                           SingularInformationError, match, refine_pose)
from .sim import ObservationSet, World, apply_gait_jitter, observe, step_odometry, stream

MAP_FORMAT = "activevtr-map"
MAP_VERSION = 1


class TeachFailure(RuntimeError):
    pass


class MalformedMapError(ValueError):
    pass


class MapVersionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PerformanceSample:
    pose: Pose
    entropy: float
    camera: str
    timestamp: float = 0.0

    def __eq__(self, other):
        return (isinstance(other, PerformanceSample) and self.pose == other.pose
                and self.entropy == other.entropy and self.camera == other.camera
                and self.timestamp == other.timestamp)


@dataclass(eq=False)
class Keyframe:
    id: int
    camera: str
    observation: ObservationSet
    map_points: MapPointSet
    signature: frozenset
    T_MB: Pose
    T_BC: Pose
    samples: List[int] = field(default_factory=list)
    cpm: Dict[str, CPMEntry] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.map_points) == 0:
            raise ValueError("keyframe needs at least one map point")
        if self.T_MB.frame_to != "M":
            raise ValueError("keyframe pose must be expressed in the map frame")

    def __eq__(self, other):
        return (isinstance(other, Keyframe) and self.id == other.id
                and self.camera == other.camera and self.observation == other.observation
                and self.map_points == other.map_points and self.signature == other.signature
                and self.T_MB == other.T_MB and self.T_BC == other.T_BC
                and self.samples == other.samples and self.cpm == other.cpm)


@dataclass(eq=False)
class TopoMetricMap:
    cameras: Dict[str, StereoCameraModel] = field(default_factory=dict)
    keyframes: List[Keyframe] = field(default_factory=list)
    relative: List[Pose] = field(default_factory=list)
    samples: List[PerformanceSample] = field(default_factory=list)
    path: List[Pose] = field(default_factory=list)
    path_times: List[float] = field(default_factory=list)
    d_max: float = 2.0
    cpm_hyper: Optional[CPMHyperparams] = None
    # in-memory only: evaluation truth and per-tick bookkeeping
    truth: List[Pose] = field(default_factory=list)
    ticks: List[tuple] = field(default_factory=list)
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def add_keyframe(self, kf: Keyframe):
        if self.keyframes:
            prev = self.keyframes[-1]
            self.relative.append(compose(prev.T_MB.inverse(), kf.T_MB).relabel("Bk", "Bk"))
        self.keyframes.append(kf)

    def keyframes_of(self, camera: str):
        return [kf for kf in self.keyframes if kf.camera == camera]

    def keyframe(self, kid: int) -> Keyframe:
        return self._by_id()[kid]

    def _by_id(self):
        cache = getattr(self, "_kf_cache", None)
        if cache is None or len(cache) != len(self.keyframes):
            cache = {kf.id: kf for kf in self.keyframes}
            self._kf_cache = cache
        return cache

    def keyframe_positions(self):
        return np.array([kf.T_MB.t for kf in self.keyframes]).reshape(-1, 3)

    def reindex_samples(self):
        for kf in self.keyframes:
            kf.samples = []
        orphans = 0
        for i, s in enumerate(self.samples):
            orphans += not _index_sample(self, i, s)
        self.diagnostics["unindexed_samples"] = orphans

    def __eq__(self, other):
        if not isinstance(other, TopoMetricMap):
            return NotImplemented
        return (self.cameras == other.cameras and self.keyframes == other.keyframes
                and self.relative == other.relative and self.samples == other.samples
                and self.path == other.path and self.path_times == other.path_times
                and self.d_max == other.d_max and self.cpm_hyper == other.cpm_hyper)


def _index_sample(map_, i, sample) -> bool:
    hit = False
    for kf in map_.keyframes:
        if translation_distance(kf.T_MB, sample.pose) <= map_.d_max:
            kf.samples.append(i)
            hit = True
    return hit


def store_sample(map_: TopoMetricMap, pose: Pose, E: float, camera_tag: str, timestamp: float = 0.0):
    sample = PerformanceSample(pose, float(E), camera_tag, float(timestamp))
    map_.samples.append(sample)
    if not _index_sample(map_, len(map_.samples) - 1, sample):
        map_.diagnostics["unindexed_samples"] = map_.diagnostics.get("unindexed_samples", 0) + 1
    return sample


# -- keyframe policy ----------------------------------------------------------

@dataclass(frozen=True)
class KeyframeThresholds:
    alpha: float = 0.9
    distance_cap: float = 1.0
    heading_cap: float = np.deg2rad(30.0)


class RunningAverage:
    def __init__(self):
        self.reset()

    def reset(self):
        self.total = 0.0
        self.count = 0

    def update(self, x):
        self.total += x
        self.count += 1

    @property
    def value(self):
        return self.total / self.count if self.count else None


def maybe_create_keyframe(running_avg_E, current_E, last_keyframe_distance,
                          thresholds: KeyframeThresholds = KeyframeThresholds(),
                          last_keyframe_heading=0.0) -> bool:
    """True when entropy fell below alpha times its running average or a cap is hit.

    ``avg - (1 - alpha) * |avg|`` equals ``alpha * avg`` for positive entropies and
    keeps the rule meaningful if the average ever goes negative.
    """
    if last_keyframe_distance > thresholds.distance_cap:
        return True
    if last_keyframe_heading > thresholds.heading_cap:
        return True
    if not np.isfinite(current_E):
        return True
    if running_avg_E is None:
        return False
    return bool(current_E < running_avg_E - (1.0 - thresholds.alpha) * abs(running_avg_E))


# -- teach loop -----------------------------------------------------------------

def camera_relative_prior_pose(T_MB_live: Pose, T_MB_kf: Pose, T_BC: Pose) -> Pose:
    """Pose mapping keyframe-camera coordinates (K) into the live camera (C)."""
    T_CB = T_BC.relabel("B", "C").inverse()
    T_BK = T_BC.relabel("Bk", "K")
    return compose(compose(compose(T_CB, T_MB_live.relabel("M", "B").inverse()),
                           T_MB_kf.relabel("M", "Bk")), T_BK)


def body_pose_from_camera(T_CK: Pose, T_MB_kf: Pose, T_BC: Pose) -> Pose:
    """Invert ``camera_relative_prior_pose``: body pose in the map from a C<-K estimate."""
    T_KC = T_CK.relabel("C", "K").inverse()
    chain = compose(compose(compose(T_MB_kf.relabel("M", "Bk"), T_BC.relabel("Bk", "K")), T_KC),
                    T_BC.relabel("B", "C").inverse())
    return chain.relabel("M", "B")


def make_keyframe(kid: int, obs: ObservationSet, camera: StereoCameraModel, T_MB: Pose,
                  min_disparity: float = 0.5) -> Optional[Keyframe]:
    disp = obs.pixels[:, 0] - obs.pixels[:, 2] if len(obs) else np.zeros(0)
    keep = disp > min_disparity
    if not keep.any():
        return None
    pts = triangulate_points(camera, obs.pixels[keep])
    return Keyframe(kid, camera.tag, obs, MapPointSet(obs.ids[keep], pts),
                    frozenset(int(i) for i in obs.ids), T_MB.relabel("M", "B"), camera.T_BC)


def localize_attempt(kf: Keyframe, obs: ObservationSet, camera: StereoCameraModel,
                     T_MB_prior: Pose, loc, rng=None):
    """match + refine_pose against one keyframe.

    Returns ``(estimate or None, correspondences, accepted)``.  The estimate is
    kept even when it has too few inliers to be accepted, so callers can log it.
    """
    prior_pose = camera_relative_prior_pose(T_MB_prior, kf.T_MB, camera.T_BC)
    prior = Prior.isotropic(prior_pose, loc.prior_rot_std, loc.prior_trans_std)
    corr = match(obs, kf.map_points, prior, camera, loc.gate_radius, loc.confusion_rate, rng)
    if len(corr) < 3:
        return None, corr, False
    est = refine_pose(prior_pose, corr, camera, ReprojectionNoise.isotropic(loc.reprojection_std), prior,
                      loc.tol, loc.max_iter, loc.huber)
    ok = len(corr) >= loc.min_inliers and est.n_inliers >= loc.min_inliers
    return est, corr, ok


def localize_against(kf: Keyframe, obs: ObservationSet, camera: StereoCameraModel,
                     T_MB_prior: Pose, loc, rng=None):
    """Like ``localize_attempt`` but returns (estimate or None, correspondences)."""
    est, corr, ok = localize_attempt(kf, obs, camera, T_MB_prior, loc, rng)
    return (est if ok else None), corr


def run_teach(scenario, world: World) -> TopoMetricMap:
    """Drive the scripted route once, one camera per tick, and build the map."""
    cams = scenario.camera_models()
    tags = list(cams)
    loc = scenario.localization_params()
    thresholds = scenario.keyframe_thresholds()
    dt = scenario.step_dt
    seed = scenario.seed
    rng_cam = {c: stream(seed, "teach", "camera", c) for c in tags}
    rng_match = {c: stream(seed, "teach", "match", c) for c in tags}
    rng_odo = stream(seed, "teach", "odometry")
    rng_jit = stream(seed, "teach", "jitter")
    odo_model = scenario.odometry_model()
    jitter = scenario.gait_jitter()
    noise = scenario.noise

    map_ = TopoMetricMap(cameras=dict(cams), d_max=scenario.cpm.d_max)
    last_kf: Dict[str, Keyframe] = {}
    avg = {c: RunningAverage() for c in tags}
    n_steps = max(int(np.floor(scenario.route_duration() / dt + 1e-9)) + 1, len(tags))
    prev_true = None
    odo = None
    failed = []
    for step in range(n_steps):
        t = step * dt
        true = apply_gait_jitter(jitter, scenario.route_pose(t), t, rng_jit)
        if prev_true is None:
            odo = true
        else:
            inc = compose(prev_true.inverse(), true).relabel("B", "B")
            odo = compose(odo, step_odometry(odo_model, inc, rng_odo))
        prev_true = true
        map_.path.append(odo)
        map_.path_times.append(t)
        map_.truth.append(true)

        tag = tags[step % len(tags)]
        cam = cams[tag]
        obs = observe(world, true, cam, (), noise.pixel_std, noise.outlier_rate, rng_cam[tag], t)

        if tag not in last_kf:
            kf = make_keyframe(len(map_.keyframes), obs, cam, odo, loc.min_disparity)
            if kf is None:
                failed.append((t, tag, "no-initial-keyframe"))
                map_.ticks.append((t, tag, "failed"))
                continue
            map_.add_keyframe(kf)
            last_kf[tag] = kf
            avg[tag].reset()
            map_.ticks.append((t, tag, "keyframe"))
            continue

        kf = last_kf[tag]
        try:
            est, _ = localize_against(kf, obs, cam, odo, loc, rng_match[tag])
        except SingularInformationError as exc:
            raise TeachFailure(
                f"degenerate localization at t={t:.2f}s, position={np.round(odo.t, 3).tolist()}, "
                f"camera={tag}") from exc
        E = est.entropy if est is not None else -np.inf
        dist = translation_distance(kf.T_MB, odo)
        heading = rotation_angle(kf.T_MB, odo)
        if maybe_create_keyframe(avg[tag].value, E, dist, thresholds, heading):
            new = make_keyframe(len(map_.keyframes), obs, cam, odo, loc.min_disparity)
            if new is None:
                failed.append((t, tag, "empty-view"))
                map_.ticks.append((t, tag, "failed"))
                continue
            map_.add_keyframe(new)
            last_kf[tag] = new
            avg[tag].reset()
            map_.ticks.append((t, tag, "keyframe"))
        else:
            store_sample(map_, odo, E, tag, t)
            avg[tag].update(E)
            map_.ticks.append((t, tag, "sample"))

    map_.reindex_samples()
    map_.diagnostics["failed_ticks"] = failed
    return map_


# -- persistence ------------------------------------------------------------------

def map_to_dict(map_: TopoMetricMap) -> dict:
    out = {
        "format": MAP_FORMAT,
        "version": MAP_VERSION,
        "header": {
            "cameras": {tag: cam.to_dict() for tag, cam in map_.cameras.items()},
            "d_max": map_.d_max,
        },
        "keyframes": [{
            "id": kf.id,
            "camera": kf.camera,
            "T_MB": kf.T_MB.to_list(),
            "T_BC": kf.T_BC.to_list(),
            "signature": sorted(kf.signature),
            "observation": kf.observation.to_dict(),
            "map_points": {"ids": kf.map_points.ids.tolist(), "points": kf.map_points.points.tolist()},
            "samples": list(kf.samples),
        } for kf in map_.keyframes],
        "relative_transforms": [p.to_list() for p in map_.relative],
        "samples": [{"pose": s.pose.to_list(), "E": s.entropy, "camera": s.camera, "t": s.timestamp}
                    for s in map_.samples],
        "path": {"t": list(map_.path_times), "poses": [p.to_list() for p in map_.path]},
        "cpm": None,
    }
    if map_.cpm_hyper is not None:
        h = map_.cpm_hyper
        out["cpm"] = {
            "hyper": {"d_max": h.d_max, "l": h.l, "k": h.k, "sigma_floor": h.sigma_floor},
            "entries": [{"keyframe": e.keyframe, "camera": e.camera, "mu": e.mu, "sigma": e.sigma,
                         "support": e.support}
                        for kf in map_.keyframes for _, e in sorted(kf.cpm.items())],
        }
    return out


def map_from_dict(d: dict) -> TopoMetricMap:
    if not isinstance(d, dict) or d.get("format") != MAP_FORMAT:
        raise MalformedMapError("not an activevtr map file")
    if d.get("version") != MAP_VERSION:
        raise MapVersionError(f"map version {d.get('version')} != supported {MAP_VERSION}")
    try:
        cams = {tag: StereoCameraModel.from_dict(c) for tag, c in d["header"]["cameras"].items()}
        m = TopoMetricMap(cameras=cams, d_max=float(d["header"]["d_max"]))
        for k in d["keyframes"]:
            kf = Keyframe(int(k["id"]), k["camera"], ObservationSet.from_dict(k["observation"]),
                          MapPointSet(k["map_points"]["ids"], k["map_points"]["points"]),
                          frozenset(int(i) for i in k["signature"]),
                          Pose.from_list(k["T_MB"], "M", "B"), Pose.from_list(k["T_BC"], "B", "C"),
                          [int(i) for i in k["samples"]])
            m.keyframes.append(kf)
        m.relative = [Pose.from_list(p, "Bk", "Bk") for p in d["relative_transforms"]]
        m.samples = [PerformanceSample(Pose.from_list(s["pose"], "M", "B"), float(s["E"]), s["camera"],
                                       float(s["t"])) for s in d["samples"]]
        m.path_times = [float(t) for t in d["path"]["t"]]
        m.path = [Pose.from_list(p, "M", "B") for p in d["path"]["poses"]]
        if d.get("cpm") is not None:
            h = d["cpm"]["hyper"]
            m.cpm_hyper = CPMHyperparams(float(h["d_max"]), float(h["l"]), float(h["k"]),
                                         float(h.get("sigma_floor", 0.0)))
            by_id = {kf.id: kf for kf in m.keyframes}
            for e in d["cpm"]["entries"]:
                entry = CPMEntry(int(e["keyframe"]), e["camera"], float(e["mu"]), float(e["sigma"]),
                                 int(e["support"]))
                by_id[entry.keyframe].cpm[entry.camera] = entry
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, (MalformedMapError, MapVersionError)):
            raise
        raise MalformedMapError(f"malformed map: {exc!r}") from exc
    return m


def save_map(map_: TopoMetricMap, path):
    Path(path).write_text(json.dumps(map_to_dict(map_), separators=(",", ":")))


def load_map(path) -> TopoMetricMap:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedMapError(f"{path}: {exc}") from exc
    return map_from_dict(data)
