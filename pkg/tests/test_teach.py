import json

import numpy as np
import pytest

from activevtr.config import load_config
from activevtr.geometry import Pose, compose, project_points, translation_distance
from activevtr.teach import (KeyframeThresholds, MalformedMapError, MapVersionError, TopoMetricMap,
                             body_pose_from_camera, camera_relative_prior_pose, load_map,
                             maybe_create_keyframe, map_to_dict, run_teach, save_map, store_sample)

from conftest import random_pose
from oracles import toy_map


def test_keyframe_rule_examples():
    th = KeyframeThresholds(alpha=0.9, distance_cap=1.0)
    assert not maybe_create_keyframe(60.0, 60.0, 0.2, th)
    assert maybe_create_keyframe(60.0, 30.0, 0.2, th)
    assert maybe_create_keyframe(60.0, 60.0, 1.01, th)
    assert maybe_create_keyframe(60.0, -np.inf, 0.2, th)
    assert not maybe_create_keyframe(None, 60.0, 0.2, th)
    assert maybe_create_keyframe(60.0, 60.0, 0.2, th, last_keyframe_heading=np.deg2rad(31))
    # the rule stays a relative drop for negative averages too
    assert not maybe_create_keyframe(-10.0, -10.5, 0.2, th)
    assert maybe_create_keyframe(-10.0, -11.5, 0.2, th)


def test_store_sample_examples():
    m = toy_map([(0, 0, 0), (5, 0, 0)])
    store_sample(m, m.keyframes[0].T_MB, 10.0, "front")
    assert m.keyframes[0].samples == [0] and m.keyframes[1].samples == []
    store_sample(m, Pose.from_xyz_rpy(20, 0, 0), 10.0, "front")
    assert len(m.samples) == 2 and m.diagnostics["unindexed_samples"] == 1
    assert all(1 not in kf.samples for kf in m.keyframes)
    for i in range(10):
        store_sample(m, Pose.from_xyz_rpy(i * 0.5, 0, 0), float(i), "rear")
    assert len(m.samples) == 12


def test_prior_pose_helpers_invert():
    rng = np.random.default_rng(0)
    for _ in range(20):
        live, kf = random_pose(rng, 3), random_pose(rng, 3)
        T_BC = random_pose(rng, 0.5, "B", "C")
        T_CK = camera_relative_prior_pose(live, kf, T_BC)
        assert (T_CK.frame_to, T_CK.frame_from) == ("C", "K")
        assert body_pose_from_camera(T_CK, kf, T_BC).allclose(live, 1e-9)


def test_teach_map_structure(indoor):
    cfg, _, m = indoor
    tags = set(m.cameras)
    assert tags == {"front", "rear"}
    for tag in tags:
        assert len(m.keyframes_of(tag)) >= 2
    assert {kf.camera for kf in m.keyframes} <= tags
    # cameras take turns, one per tick
    cams = [c for _, c, _ in m.ticks]
    assert all(a != b for a, b in zip(cams, cams[1:]))
    kf_pos = m.keyframe_positions()
    for p in m.path:
        assert np.min(np.linalg.norm(kf_pos - p.t, axis=1)) <= m.d_max


def test_sample_completeness(indoor):
    _, _, m = indoor
    ok = [k for _, _, k in m.ticks if k != "failed"]
    assert len(m.keyframes) + len(m.samples) == len(ok)
    assert all(s.camera in m.cameras for s in m.samples)


def test_keyframe_spacing(indoor):
    cfg, _, m = indoor
    # the cap is checked once per camera tick, so one tick of motion may overshoot it
    slack = cfg.route.speed / cfg.camera_rate_hz + 0.05
    for tag in m.cameras:
        kfs = m.keyframes_of(tag)
        gaps = [translation_distance(a.T_MB, b.T_MB) for a, b in zip(kfs, kfs[1:])]
        assert max(gaps) <= cfg.keyframes.distance_cap + slack


def test_relative_transforms_chain(indoor):
    _, _, m = indoor
    assert len(m.relative) == len(m.keyframes) - 1
    for a, b, rel in zip(m.keyframes, m.keyframes[1:], m.relative):
        assert compose(a.T_MB.relabel("M", "Bk"), rel).relabel("M", "B").allclose(b.T_MB, 1e-9)


def test_map_points_live_in_keyframe_camera(indoor):
    cfg, world, m = indoor
    errs = []
    for kf in m.keyframes[:20]:
        cam = m.cameras[kf.camera]
        sel = np.isin(kf.observation.ids, kf.map_points.ids)
        pix, _ = project_points(cam, kf.map_points.points)
        assert np.allclose(pix, kf.observation.pixels[sel], atol=1e-9)
        truth = m.truth[int(round(kf.observation.timestamp / cfg.step_dt))]
        T_MC = compose(truth, kf.T_BC)
        pos = world.positions[np.searchsorted(world.ids, kf.map_points.ids)]
        near = ~kf.observation.outlier[sel] & (kf.map_points.points[:, 2] < 3.0)
        errs += list(np.linalg.norm(T_MC.transform(kf.map_points.points) - pos, axis=1)[near])
    assert len(errs) > 30 and np.median(errs) < 0.1


def test_map_round_trip(indoor, tmp_path):
    _, _, m = indoor
    save_map(m, tmp_path / "map.json")
    back = load_map(tmp_path / "map.json")
    assert back == m
    assert map_to_dict(back) == map_to_dict(m)


def test_truncated_and_versioned_files(indoor, tmp_path):
    _, _, m = indoor
    save_map(m, tmp_path / "map.json")
    text = (tmp_path / "map.json").read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(MalformedMapError):
        load_map(tmp_path / "cut.json")
    d = json.loads(text)
    d["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(d))
    with pytest.raises(MapVersionError):
        load_map(tmp_path / "v.json")
    del d["keyframes"]
    d["version"] = 1
    (tmp_path / "k.json").write_text(json.dumps(d))
    with pytest.raises(MalformedMapError):
        load_map(tmp_path / "k.json")


def test_empty_map_round_trip(tmp_path):
    save_map(TopoMetricMap(), tmp_path / "empty.json")
    assert load_map(tmp_path / "empty.json") == TopoMetricMap()


def test_zero_length_route():
    cfg = load_config("indoor")
    cfg = type(cfg).model_validate({**cfg.model_dump(), "route": {"waypoints": [[0, 0, 0]]}})
    m = run_teach(cfg, cfg.build_world())
    assert sorted(kf.camera for kf in m.keyframes) == ["front", "rear"]
    assert m.samples == []
