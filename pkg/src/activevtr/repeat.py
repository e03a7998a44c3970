"""Repeat step: status machine, active camera selection, relocalization and path following."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cpm import best_camera, should_switch
from .geometry import Pose, StereoCameraModel, compose, so3_exp, translation_distance
from .localization import (LocalizationError, Prior, ReprojectionNoise, match, ransac_pnp,
                           refine_pose)
from .sim import ObservationSet, apply_gait_jitter, observe, step_odometry, stream
from .teach import Keyframe, TopoMetricMap, body_pose_from_camera, localize_attempt


class Status(str, Enum):
    LOST = "Lost"
    LOCALIZED = "Localized"
    TRACKING_LOST = "TrackingLost"


class Reason(str, Enum):
    BETTER_CAMERA = "BetterCamera"
    BELOW_MARGIN = "BelowMargin"
    FLAGGED = "Flagged"
    RELOCALIZED = "Relocalized"


class RelocalizationFailure(RuntimeError):
    pass


class MissionComplete(Exception):
    pass


@dataclass
class CameraFlagTable:
    flagged_until: Dict[str, float] = field(default_factory=dict)

    def flag(self, camera, now, cooldown):
        self.flagged_until[camera] = now + cooldown

    def is_flagged(self, camera, now):
        return now < self.flagged_until.get(camera, -np.inf)


@dataclass
class ReferenceKeyframeSet:
    refs: Dict[str, int] = field(default_factory=dict)

    def set(self, camera, keyframe: Keyframe):
        if keyframe.camera != camera:
            raise ValueError(f"reference for {camera} must be one of its own keyframes")
        self.refs[camera] = keyframe.id

    def get(self, camera):
        return self.refs.get(camera)


@dataclass
class RepeatParams:
    k: float = 2.0
    flag_cooldown: float = 5.0
    orientation_threshold: float = np.deg2rad(30.0)
    local_radius: float = 3.0
    lost_timeout: float = 10.0
    relocalization_candidates: int = 5


@dataclass
class ControllerGains:
    gain_xy: float = 1.5
    gain_yaw: float = 1.5
    v_max: float = 0.5
    w_max: float = np.deg2rad(45.0)


# -- waypoints and control ---------------------------------------------------------

YAW_WEIGHT = 0.5  # metres per radian when ranking waypoints


@dataclass
class WaypointPlan:
    poses: List[Pose]
    target: int = 0
    lookahead: int = 2
    window: int = 25

    def __post_init__(self):
        if not self.poses:
            raise ValueError("waypoint plan is empty")

    @classmethod
    def from_path(cls, path: Sequence[Pose], spacing=0.2, yaw_spacing=np.deg2rad(10.0),
                  reverse=False, lookahead=2):
        seq = list(path)[::-1] if reverse else list(path)
        out = [seq[0]]
        for p in seq[1:]:
            last = out[-1]
            if (translation_distance(last, p) >= spacing
                    or abs(_wrap(p.yaw - last.yaw)) >= yaw_spacing):
                out.append(p)
        if len(out) == 1 or out[-1] is not seq[-1]:
            out.append(seq[-1])
        return cls(out, 0, lookahead)


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def next_waypoint(plan: WaypointPlan, current: Pose) -> Pose:
    """Closest waypoint at or after the current target (within a window), advanced by the lookahead.

    Raises MissionComplete once the closest waypoint is the final one.
    """
    last = len(plan.poses) - 1
    hi = min(last, plan.target + plan.window)
    best, best_d = plan.target, np.inf
    cand = list(range(plan.target, hi + 1))
    # past halfway the goal is always in reach, so overshooting it still ends the mission;
    # earlier it is not, so a route that ends where it starts does not finish at once
    if hi < last and 2 * plan.target >= last:
        cand.append(last)
    for i in cand:
        p = plan.poses[i]
        d = np.linalg.norm(p.t - current.t) + YAW_WEIGHT * abs(_wrap(p.yaw - current.yaw))
        if d < best_d:
            best, best_d = i, d
    plan.target = best
    if best >= last:
        raise MissionComplete()
    return plan.poses[min(best + plan.lookahead, last)]


def follow(command: Pose, current: Pose, gains: ControllerGains, dt: float, jitter=None,
           t: float = 0.0, rng: Optional[np.random.Generator] = None,
           estimate: Optional[Pose] = None) -> Pose:
    """One holonomic proportional step toward ``command``.

    The velocity is computed from ``estimate`` (defaults to ``current``) in its
    body frame, clamped, and integrated on ``current``.  With ``jitter`` the
    gait perturbation is applied to the integrated pose.
    """
    ref = estimate if estimate is not None else current
    err = ref.R.T @ (command.t - ref.t)
    v = gains.gain_xy * err[:2]
    speed = np.linalg.norm(v)
    if speed > gains.v_max:
        v *= gains.v_max / speed
    w = float(np.clip(gains.gain_yaw * _wrap(command.yaw - ref.yaw), -gains.w_max, gains.w_max))
    yaw = current.yaw
    c, s = np.cos(yaw), np.sin(yaw)
    dxy = np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]]) * dt
    R = so3_exp([0.0, 0.0, w * dt]) @ current.R
    nxt = Pose.from_rt(R, current.t + np.array([dxy[0], dxy[1], 0.0]), current.frame_to,
                       current.frame_from)
    if jitter is not None:
        nxt = apply_gait_jitter(jitter, nxt, t, rng if rng is not None else np.random.default_rng(0))
    return nxt


def dead_reckon(last: Pose, increments: Sequence[Pose]) -> Pose:
    pose = last
    for inc in increments:
        pose = compose(pose, inc.relabel("B", "B"))
    return pose


# -- relocalization -------------------------------------------------------------------

class KeyframeIndex:
    """Per-camera arrays of keyframe positions and rotations for nearest queries."""

    def __init__(self, map_: TopoMetricMap):
        self.map = map_
        self.by_cam = {}
        for tag in map_.cameras:
            kfs = map_.keyframes_of(tag)
            if kfs:
                self.by_cam[tag] = (kfs, np.array([k.T_MB.t for k in kfs]),
                                    np.array([k.T_MB.R for k in kfs]))
        self.all_pos = map_.keyframe_positions()

    def nearest(self, camera, pose: Pose, orientation_threshold) -> Optional[Keyframe]:
        if camera not in self.by_cam:
            return None
        kfs, pos, rots = self.by_cam[camera]
        d = np.linalg.norm(pos - pose.t, axis=1)
        cos = (np.einsum("kij,ij->k", rots, pose.R) - 1.0) * 0.5
        ang = np.arccos(np.clip(cos, -1.0, 1.0))
        ok = ang < orientation_threshold
        if ok.any():
            d = np.where(ok, d, np.inf)
        return kfs[int(np.argmin(d))]


def verify(kf: Keyframe, obs: ObservationSet, camera: StereoCameraModel, loc, seed=0):
    """PnP registration then robust refinement against one keyframe, or None."""
    corr = match(obs, kf.map_points, None, camera)
    if len(corr) < max(4, loc.min_inliers):
        return None
    try:
        pose, inl = ransac_pnp(corr, camera, loc.ransac_iterations, loc.inlier_threshold_px, seed)
        sub = corr.subset(inl)
        est = refine_pose(pose, sub, camera, ReprojectionNoise.isotropic(loc.reprojection_std),
                          Prior.isotropic(pose, loc.prior_rot_std, loc.prior_trans_std),
                          loc.tol, loc.max_iter, loc.huber)
    except LocalizationError:
        return None
    if est.n_inliers < loc.min_inliers:
        return None
    return est


def _signature_score(obs: ObservationSet, kf: Keyframe):
    ids = set(int(i) for i in obs.ids)
    union = len(ids | kf.signature)
    return len(ids & kf.signature) / union if union else 0.0


def global_relocalize(map_: TopoMetricMap, observations: Dict[str, ObservationSet], loc,
                      params: RepeatParams = RepeatParams(), index: Optional[KeyframeIndex] = None,
                      cameras: Optional[Sequence[str]] = None, seed=0):
    """Place recognition by id overlap, verified by PnP + refinement.

    Returns ``(body_pose, ReferenceKeyframeSet, keyframe, estimate)``; raises
    RelocalizationFailure when no candidate verifies.
    """
    index = index or KeyframeIndex(map_)
    allowed = set(cameras) if cameras is not None else set(map_.cameras)
    scored = []
    for kf in map_.keyframes:
        if kf.camera in observations and kf.camera in allowed:
            s = _signature_score(observations[kf.camera], kf)
            if s > 0:
                scored.append((-s, kf.id, kf))
    scored.sort(key=lambda x: (x[0], x[1]))
    best = None
    for _, _, kf in scored[:params.relocalization_candidates]:
        cam = map_.cameras[kf.camera]
        est = verify(kf, observations[kf.camera], cam, loc, seed)
        if est is not None and (best is None or est.n_inliers > best[1].n_inliers):
            best = (kf, est)
    if best is None:
        raise RelocalizationFailure("no place-recognition candidate verified")
    kf, est = best
    cam = map_.cameras[kf.camera]
    pose = body_pose_from_camera(est.pose, kf.T_MB, cam.T_BC)
    refs = ReferenceKeyframeSet()
    refs.set(kf.camera, kf)
    for tag in map_.cameras:
        if tag != kf.camera:
            other = index.nearest(tag, pose, params.orientation_threshold)
            if other is not None:
                refs.set(tag, other)
    return pose, refs, kf, est


def local_relocalize(map_: TopoMetricMap, predicted: Pose, observations: Dict[str, ObservationSet],
                     radius: float, loc, exclude: Sequence[str] = (), seed=0):
    """Try keyframes within ``radius`` of the prediction, nearest first; stop at the first success.

    Returns ``(body_pose, keyframe, estimate, attempts)`` with ``body_pose`` None on failure.
    """
    cands = []
    for kf in map_.keyframes:
        if kf.camera in observations and kf.camera not in exclude:
            d = translation_distance(kf.T_MB, predicted)
            if d <= radius:
                cands.append((d, kf.id, kf))
    cands.sort(key=lambda x: (x[0], x[1]))
    attempts = 0
    for _, _, kf in cands:
        attempts += 1
        cam = map_.cameras[kf.camera]
        est = verify(kf, observations[kf.camera], cam, loc, seed)
        if est is not None:
            return body_pose_from_camera(est.pose, kf.T_MB, cam.T_BC), kf, est, attempts
    return None, None, None, attempts


# -- the repeat loop --------------------------------------------------------------------

@dataclass
class RepeatState:
    status: Status = Status.LOST
    estimate: Optional[Pose] = None
    active: Optional[str] = None
    refs: ReferenceKeyframeSet = field(default_factory=ReferenceKeyframeSet)
    flags: CameraFlagTable = field(default_factory=CameraFlagTable)
    last_success: Optional[float] = None
    lost_since: Optional[float] = None
    terminated: bool = False


@dataclass
class TickLog:
    t: float
    status: str
    active: Optional[str]
    reference: Optional[int]
    camera: str
    localized: bool
    E: Optional[float]
    mu: Optional[float]
    sigma: Optional[float]
    estimate: Optional[Pose]
    truth: Pose
    events: List[dict]
    since_success: Optional[float] = None

    def to_dict(self, repeat: int):
        return {
            "repeat": repeat,
            "t": round(self.t, 9),
            "status": self.status,
            "active_camera": self.active,
            "reference_keyframe": self.reference,
            "frame_camera": self.camera,
            "localized": self.localized,
            "E": _num(self.E),
            "cpm_mu": _num(self.mu),
            "cpm_sigma": _num(self.sigma),
            "estimate": self.estimate.to_list() if self.estimate is not None else None,
            "truth": self.truth.to_list(),
            "events": self.events,
            "since_success": _num(self.since_success),
        }


def _num(x):
    if x is None or not np.isfinite(x):
        return None
    return float(x)


class Navigator:
    """Camera manager plus metric localization for one repeat run."""

    def __init__(self, map_: TopoMetricMap, loc, params: RepeatParams,
                 lock_camera: Optional[str] = None, match_rng=None):
        self.map = map_
        self.loc = loc
        self.params = params
        self.lock = lock_camera
        self.index = KeyframeIndex(map_)
        self.state = RepeatState()
        self.match_rng = match_rng or np.random.default_rng(0)
        self.tags = list(map_.cameras)

    def allowed(self):
        return [self.lock] if self.lock else self.tags

    def refresh_refs(self):
        for tag in self.allowed():
            kf = self.index.nearest(tag, self.state.estimate, self.params.orientation_threshold)
            if kf is not None:
                self.state.refs.set(tag, kf)

    def _relocalized(self, t, pose, kf, events):
        st = self.state
        st.status = Status.LOCALIZED
        st.estimate = pose
        st.active = kf.camera
        st.last_success = t
        st.lost_since = None
        self.refresh_refs()
        st.refs.set(kf.camera, kf)
        events.append({"reason": Reason.RELOCALIZED.value, "from": None, "to": str(kf.camera)})

    def predict(self, increment: Pose):
        if self.state.estimate is not None:
            self.state.estimate = compose(self.state.estimate, increment.relabel("B", "B"))

    def step(self, t: float, obs: ObservationSet, seed=0) -> TickLog:
        """Process the frame that arrived at ``t`` (after odometry prediction)."""
        st = self.state
        events: List[dict] = []
        localized = False
        E = mu = sigma = None
        cam_tag = obs.camera
        if st.terminated:
            pass
        elif st.status == Status.LOST:
            if cam_tag in self.allowed():
                try:
                    pose, refs, kf, _ = global_relocalize(
                        self.map, {cam_tag: obs}, self.loc, self.params, self.index,
                        self.allowed(), seed)
                    st.refs = refs
                    self._relocalized(t, pose, kf, events)
                    localized = True
                except RelocalizationFailure:
                    pass
        elif st.status == Status.TRACKING_LOST:
            excl = [c for c in self.tags if st.flags.is_flagged(c, t) or c not in self.allowed()]
            pose, kf, _, _ = local_relocalize(self.map, st.estimate, {cam_tag: obs},
                                              self.params.local_radius, self.loc, excl, seed)
            if pose is not None:
                self._relocalized(t, pose, kf, events)
                localized = True
            elif t - st.lost_since >= self.params.lost_timeout - 1e-9:
                st.status = Status.LOST
                st.terminated = True
        elif cam_tag == st.active:
            E, mu, sigma, localized = self._track(t, obs, events)

        ref = st.refs.get(st.active) if st.active else None
        since = round(t - st.last_success, 9) if st.last_success is not None else None
        return TickLog(t, st.status.value, st.active, ref, cam_tag, localized, E, mu, sigma,
                       st.estimate, None, events, since)

    def _track(self, t, obs, events):
        st = self.state
        active = st.active
        cam = self.map.cameras[active]
        self.refresh_refs()
        kf = self.map.keyframe(st.refs.get(active))
        try:
            est, _, ok = localize_attempt(kf, obs, cam, st.estimate, self.loc, self.match_rng)
        except LocalizationError:
            est, ok = None, False
        # a rejected estimate still carries an entropy worth logging
        E = est.entropy if est is not None else -np.inf
        if ok:
            st.estimate = body_pose_from_camera(est.pose, kf.T_MB, cam.T_BC)
            st.last_success = t
        self.refresh_refs()
        ref_kf = self.map.keyframe(st.refs.get(active))
        entry = ref_kf.cpm.get(active)
        mu = entry.mu if entry else None
        sigma = entry.sigma if entry else None

        if self.lock is None:
            best = best_camera(ref_kf)
            # the candidate's own reference must agree, otherwise two cameras whose
            # keyframes rank each other first would trade places every tick
            if best is not None and best != active and not st.flags.is_flagged(best, t) \
                    and st.refs.get(best) is not None \
                    and best_camera(self.map.keyframe(st.refs.get(best))) == best:
                st.active = best
                events.append({"reason": Reason.BETTER_CAMERA.value, "from": active, "to": str(best)})
                return E, mu, sigma, ok

        below = (entry is not None and should_switch(E, entry, self.params.k)) or not ok
        if below:
            nxt = None
            if self.lock is None:
                others = [c for c, e in sorted(ref_kf.cpm.items(), key=lambda x: (-x[1].mu, x[0]))
                          if c != active and not st.flags.is_flagged(c, t)
                          and st.refs.get(c) is not None]
                if not others:
                    others = [c for c in self.tags if c != active and c not in ref_kf.cpm
                              and not st.flags.is_flagged(c, t) and st.refs.get(c) is not None]
                nxt = others[0] if others else None
            if nxt is not None:
                st.flags.flag(active, t, self.params.flag_cooldown)
                events.append({"reason": Reason.FLAGGED.value, "from": active, "to": None})
                events.append({"reason": Reason.BELOW_MARGIN.value, "from": active, "to": str(nxt)})
                st.active = nxt
            elif not ok:
                st.flags.flag(active, t, self.params.flag_cooldown)
                events.append({"reason": Reason.FLAGGED.value, "from": active, "to": None})
                st.status = Status.TRACKING_LOST
                st.lost_since = t
                st.active = None
        return E, mu, sigma, ok


def repeat_tick(nav: Navigator, t: float, obs: ObservationSet, increment: Pose, seed=0) -> TickLog:
    nav.predict(increment)
    return nav.step(t, obs, seed)


@dataclass
class RepeatResult:
    index: int
    reverse: bool
    completion: str
    logs: List[TickLog]
    truth: List[Pose]
    estimates: List[Optional[Pose]]

    def switch_counts(self):
        counts = {r.value: 0 for r in Reason}
        for rec in self.logs:
            for ev in rec.events:
                counts[ev["reason"]] += 1
        return counts


def run_repeat(scenario, world, map_: TopoMetricMap, index: int = 0,
               lock_camera: Optional[str] = None, seed: Optional[int] = None) -> RepeatResult:
    """Closed-loop repeat of the taught path in the simulator."""
    seed = scenario.seed if seed is None else seed
    cams = map_.cameras
    tags = list(cams)
    loc = scenario.localization_params()
    rc = scenario.repeat
    params = RepeatParams(scenario.cpm.k, rc.flag_cooldown, np.deg2rad(rc.orientation_threshold_deg),
                          rc.local_radius, rc.lost_timeout, rc.relocalization_candidates)
    cc = scenario.controller
    gains = ControllerGains(cc.gain_xy, cc.gain_yaw, cc.v_max, np.deg2rad(cc.w_max_deg))
    reverse = bool(rc.alternate_direction and index % 2 == 1)
    plan = WaypointPlan.from_path(map_.path, cc.waypoint_spacing, reverse=reverse,
                                  lookahead=cc.lookahead)
    phase = ("repeat", index)
    rng_cam = {c: stream(seed, *phase, "camera", c) for c in tags}
    rng_odo = stream(seed, *phase, "odometry")
    rng_jit = stream(seed, *phase, "jitter")
    rng_start = stream(seed, *phase, "start")
    nav = Navigator(map_, loc, params, lock_camera, stream(seed, *phase, "match"))
    jitter = scenario.gait_jitter()
    odo_model = scenario.odometry_model()
    noise = scenario.noise
    occl = [ev for ev in scenario.occlusion_events() if ev.repeat is None or ev.repeat == index]
    kidnaps = [k for k in scenario.kidnaps if k.repeat is None or k.repeat == index]
    dt = scenario.step_dt

    start_truth = map_.truth[-1] if reverse else map_.truth[0]
    off = rng_start.standard_normal(2) * rc.start_offset_std
    nominal = Pose.from_xyz_rpy(start_truth.t[0] + off[0], start_truth.t[1] + off[1],
                                scenario.route.body_height, yaw=start_truth.yaw)
    true = apply_gait_jitter(jitter, nominal, 0.0, rng_jit)
    prev_true = true
    teach_duration = map_.path_times[-1] if map_.path_times else 0.0
    max_steps = int(np.ceil((rc.max_duration_factor * teach_duration + 2 * rc.lost_timeout) / dt))

    logs, truths, ests = [], [], []
    completion = "timeout"
    for step in range(max_steps):
        t = step * dt
        if step > 0:
            inc = compose(prev_true.inverse(), true).relabel("B", "B")
            odo_inc = step_odometry(odo_model, inc, rng_odo)
        else:
            odo_inc = Pose.identity("B", "B")
        prev_true = true
        tag = tags[step % len(tags)]
        active_occ = [ev for ev in occl if ev.active(tag, t)]
        obs = observe(world, true, cams[tag], active_occ, noise.pixel_std, noise.outlier_rate,
                      rng_cam[tag], t)
        rec = repeat_tick(nav, t, obs, odo_inc, seed=step)
        rec.truth = true
        logs.append(rec)
        truths.append(true)
        ests.append(nav.state.estimate)
        st = nav.state
        if st.terminated:
            completion = "lost"
            break
        if st.status != Status.LOST:
            try:
                cmd = next_waypoint(plan, st.estimate)
            except MissionComplete:
                completion = "success"
                break
            nominal = follow(cmd, nominal, gains, dt, estimate=st.estimate)
        for k in kidnaps:
            if abs(t + dt - k.time) < 0.5 * dt:
                shift = np.zeros(3)
                shift[:len(k.offset)] = k.offset
                nominal = Pose(nominal.q, nominal.t + shift, nominal.frame_to, nominal.frame_from)
                # proprioception does not feel the carry
                prev_true = Pose(prev_true.q, prev_true.t + shift, prev_true.frame_to,
                                 prev_true.frame_from)
        true = apply_gait_jitter(jitter, nominal, t + dt, rng_jit)
    return RepeatResult(index, reverse, completion, logs, truths, ests)
