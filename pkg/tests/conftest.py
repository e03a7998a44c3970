import numpy as np
import pytest

from activevtr.config import load_config
from activevtr.geometry import Pose, StereoCameraModel
from activevtr.harness import teach_and_learn


@pytest.fixture
def small_cam():
    # 128x128 toy model used by the hand-worked projection examples
    return StereoCameraModel(fx=100.0, fy=100.0, cx=64.0, cy=64.0, baseline=0.1, width=128, height=128)


@pytest.fixture
def cam():
    return StereoCameraModel(fx=400.0, fy=400.0, cx=320.0, cy=240.0, baseline=0.1, width=640, height=480)


def random_pose(rng, scale=1.0, frame_to="M", frame_from="B"):
    w = rng.normal(size=3)
    w *= rng.uniform(0, np.pi) / np.linalg.norm(w)
    return Pose.from_rotvec(w, rng.normal(size=3) * scale, frame_to, frame_from)


_MAPS = {}


def fixture_map(name):
    """teach + learn for a bundled scenario, cached for the session."""
    if name not in _MAPS:
        cfg = load_config(name)
        world, map_ = teach_and_learn(cfg)
        _MAPS[name] = (cfg, world, map_)
    return _MAPS[name]


@pytest.fixture(scope="session")
def indoor():
    return fixture_map("indoor")


@pytest.fixture(scope="session")
def occlusion_run():
    from activevtr.repeat import run_repeat
    cfg, world, map_ = fixture_map("occlusion")
    return cfg, world, map_, run_repeat(cfg, world, map_, 0)


CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, title, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {title} | {detail}")
