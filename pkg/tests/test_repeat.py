import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from activevtr.geometry import Pose, compose, translation_distance
from activevtr.repeat import (ControllerGains, KeyframeIndex, MissionComplete, Navigator, Reason,
                              RelocalizationFailure, RepeatParams, Status, WaypointPlan, dead_reckon,
                              follow, global_relocalize, local_relocalize, next_waypoint, _signature_score)
from activevtr.sim import GaitJitter, ObservationSet, OdometryModel, observe, step_odometry, stream

EDGES = {("Lost", "Localized"), ("Localized", "TrackingLost"), ("TrackingLost", "Localized"),
         ("TrackingLost", "Lost")}


def line_plan(n=50, step=0.2, lookahead=2):
    return WaypointPlan([Pose.from_xyz_rpy(i * step, 0, 0.5) for i in range(n)], 0, lookahead)


# -- waypoints and control -----------------------------------------------------

def test_waypoint_examples():
    plan = line_plan()
    assert next_waypoint(plan, plan.poses[0]) is plan.poses[2]
    assert next_waypoint(plan, plan.poses[10]) is plan.poses[12]
    cmd = next_waypoint(plan, Pose.from_xyz_rpy(2.41, 0.3, 0.5))
    assert any(cmd is p for p in plan.poses)
    for x in np.arange(2.6, 6.0, 0.2):
        next_waypoint(plan, Pose.from_xyz_rpy(x, 0, 0.5))
    with pytest.raises(MissionComplete):
        next_waypoint(plan, Pose.from_xyz_rpy(50, 0, 0.5))


def test_waypoint_never_regresses():
    plan = line_plan()
    next_waypoint(plan, plan.poses[20])
    next_waypoint(plan, plan.poses[3])
    assert plan.target == 20


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 11), st.floats(-1, 1), st.floats(-3, 3)), min_size=1, max_size=30))
def test_waypoint_target_monotone(track):
    plan = line_plan()
    last = 0
    for x, y, yaw in track:
        try:
            next_waypoint(plan, Pose.from_xyz_rpy(x, y, 0.5, yaw=yaw))
        except MissionComplete:
            break
        assert plan.target >= last
        last = plan.target


def test_plan_subsampling_keeps_turns():
    path = [Pose.from_xyz_rpy(0, 0, 0.5, yaw=np.deg2rad(a)) for a in range(0, 91, 2)]
    plan = WaypointPlan.from_path(path, spacing=0.2)
    assert len(plan.poses) >= 9 and plan.poses[-1] is path[-1]
    rev = WaypointPlan.from_path(path, reverse=True)
    assert rev.poses[0] is path[-1] and rev.poses[-1] is path[0]


def test_follow_examples():
    g = ControllerGains(1.5, 1.5, 0.5, np.deg2rad(45))
    p = Pose.from_xyz_rpy(1, 2, 0.5, yaw=0.4)
    assert follow(p, p, g, 0.1).allclose(p, 1e-12)
    ahead = Pose.from_xyz_rpy(1 + np.cos(0.4), 2 + np.sin(0.4), 0.5, yaw=0.4)
    nxt = follow(ahead, p, g, 0.1)
    assert abs(translation_distance(p, nxt) - 0.05) < 1e-12
    assert abs(translation_distance(nxt, ahead) - 0.95) < 1e-12


def test_closed_loop_converges_to_line():
    plan = line_plan(n=60, step=0.2)
    g = ControllerGains()
    jit = GaitJitter(0.02, 2.0, 0.005)
    rng = stream(3, "loop")
    true = Pose.from_xyz_rpy(0, 0.3, 0.5)
    lateral = []
    t = 0.0
    for _ in range(2000):
        est = Pose(true.q, true.t + np.r_[rng.normal(0, 0.01, 2), 0.0])
        try:
            cmd = next_waypoint(plan, est)
        except MissionComplete:
            break
        true = follow(cmd, true, g, 0.05, jit, t, rng, estimate=est)
        t += 0.05
        lateral.append(true.t[1])
    tail = np.abs(lateral[len(lateral) // 2:])
    assert len(lateral) > 100 and tail.max() < 0.05


def test_dead_reckon_examples():
    rng = np.random.default_rng(0)
    start = Pose.from_xyz_rpy(1, 2, 0.5, yaw=0.3)
    assert dead_reckon(start, []) is start
    incs = [Pose.from_rotvec(rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.1, "B", "B") for _ in range(5)]
    direct = start
    for inc in incs:
        direct = compose(direct, inc)
    assert dead_reckon(start, incs).allclose(direct, 1e-12)


def test_dead_reckon_error_is_a_random_walk():
    sig, rate = 0.003, 20
    model = OdometryModel(sig, 0.0)
    inc = Pose.from_xyz_rpy(0.025, 0, 0, frame_to="B", frame_from="B")
    rng = stream(9, "dr")
    runs = 400
    err1, err10 = np.empty((runs, 3)), np.empty((runs, 3))
    for r in range(runs):
        noisy = [step_odometry(model, inc, rng) for _ in range(10 * rate)]
        truth = [inc] * (10 * rate)
        err1[r] = dead_reckon(Pose.identity(), noisy[:rate]).t - dead_reckon(Pose.identity(), truth[:rate]).t
        err10[r] = dead_reckon(Pose.identity(), noisy).t - dead_reckon(Pose.identity(), truth).t
    assert np.linalg.norm(err10, axis=1).mean() > np.linalg.norm(err1, axis=1).mean()
    s10 = sig * np.sqrt(10 * rate)
    assert np.mean(np.abs(err10) > 3 * s10) < 0.01
    assert abs(err10.std() / s10 - 1) < 0.1


# -- relocalization ------------------------------------------------------------

def test_global_reloc_at_keyframe(indoor):
    cfg, world, m = indoor
    loc = cfg.localization_params()
    kf = m.keyframes_of("front")[5]
    obs = kf.observation
    scores = [_signature_score(obs, k) for k in m.keyframes_of("front")]
    assert int(np.argmax(scores)) == 5
    pose, refs, best, est = global_relocalize(m, {"front": obs}, loc)
    assert best is kf and refs.get("front") == kf.id
    assert pose.allclose(kf.T_MB, 1e-6)
    assert refs.get("rear") is not None and m.keyframe(refs.get("rear")).camera == "rear"


def test_global_reloc_without_overlap(indoor):
    cfg, _, m = indoor
    obs = m.keyframes[0].observation
    alien = ObservationSet("front", 0.0, obs.ids + 10**6, obs.pixels, obs.pixel_std, obs.outlier)
    with pytest.raises(RelocalizationFailure):
        global_relocalize(m, {"front": alien}, cfg.localization_params())


def _truth_in_map(m, cfg, t, kf):
    # the map frame is the drifting teach odometry; carry truth over through the keyframe
    i = int(round(t / cfg.step_dt))
    j = int(round(kf.observation.timestamp / cfg.step_dt))
    return compose(m.path[j], compose(m.truth[j].inverse(), m.truth[i]).relabel("B", "B"))


def test_global_reloc_between_keyframes(indoor):
    cfg, world, m = indoor
    cam = m.cameras["front"]
    kfs = m.keyframes_of("front")
    for a, b in zip(kfs[3:8], kfs[4:9]):
        t = 0.5 * (a.observation.timestamp + b.observation.timestamp)
        i = int(round(t / cfg.step_dt))
        obs = observe(world, m.truth[i], cam, (), 0.5, 0.05, stream(0, "mid", i), t)
        pose, _, kf, _ = global_relocalize(m, {"front": obs}, cfg.localization_params())
        assert kf.id in (a.id, b.id)
        assert translation_distance(pose, _truth_in_map(m, cfg, t, kf)) < 0.05


def test_local_reloc_first_candidate(indoor):
    cfg, _, m = indoor
    kf = m.keyframes_of("rear")[4]
    pose, got, _, attempts = local_relocalize(m, kf.T_MB, {"rear": kf.observation}, 3.0,
                                              cfg.localization_params())
    assert got is kf and attempts == 1 and pose.allclose(kf.T_MB, 1e-6)


def test_local_reloc_respects_exclusion_and_radius(indoor):
    cfg, _, m = indoor
    kf = m.keyframes_of("rear")[4]
    loc = cfg.localization_params()
    pose, _, _, attempts = local_relocalize(m, kf.T_MB, {"rear": kf.observation}, 3.0, loc, ["rear"])
    assert pose is None and attempts == 0
    far = Pose(kf.T_MB.q, kf.T_MB.t + [0, 50, 0])
    assert local_relocalize(m, far, {"rear": kf.observation}, 3.0, loc)[3] == 0


def test_exhausted_cameras_mean_tracking_lost(indoor):
    cfg, _, m = indoor
    nav = Navigator(m, cfg.localization_params(), RepeatParams())
    kf = m.keyframes_of("front")[3]
    st_ = nav.state
    st_.status, st_.estimate, st_.active, st_.last_success = Status.LOCALIZED, kf.T_MB, "front", 0.0
    nav.refresh_refs()
    st_.flags.flag("rear", 0.0, 5.0)
    empty = kf.observation.subset(np.zeros(len(kf.observation), bool))
    rec = nav.step(0.1, empty)
    assert rec.status == "TrackingLost" and st_.active is None
    assert [e["reason"] for e in rec.events] == ["Flagged"]
    assert st_.flags.is_flagged("front", 0.2)


def test_reference_set_checks_camera(indoor):
    from activevtr.repeat import ReferenceKeyframeSet
    _, _, m = indoor
    with pytest.raises(ValueError):
        ReferenceKeyframeSet().set("rear", m.keyframes_of("front")[0])


# -- whole-run invariants -------------------------------------------------------

def test_run_invariants(occlusion_run):
    cfg, _, m, res = occlusion_run
    statuses = [r.status for r in res.logs]
    assert set(statuses) <= {"Lost", "Localized", "TrackingLost"}
    for a, b in zip(statuses, statuses[1:]):
        assert a == b or (a, b) in EDGES
    flagged = {}
    for r in res.logs:
        if r.status == "Localized":
            assert r.active is not None and r.reference is not None
            assert m.keyframe(r.reference).camera == r.active
            assert r.t >= flagged.get(r.active, -np.inf)
        for e in r.events:
            if e["reason"] == "Flagged":
                flagged[e["from"]] = r.t + cfg.repeat.flag_cooldown
    assert res.completion == "success"
