"""Scenario orchestration, path tracking error and run reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cpm import learn_cpm
from .geometry import Pose
from .repeat import Reason, RepeatResult, run_repeat
from .teach import TopoMetricMap, load_map, run_teach, save_map

PTE_NEIGHBORS = 6


class DegenerateFitError(ValueError):
    pass


@dataclass
class PTEResult:
    errors: np.ndarray
    mean: float
    std: float
    max: float

    def to_dict(self):
        return {"mean": float(self.mean), "std": float(self.std), "max": float(self.max)}


def _positions(path):
    if len(path) and isinstance(path[0], Pose):
        return np.array([p.t for p in path], float)
    return np.asarray(path, float).reshape(-1, 3)


def compute_pte(teach_path, repeat_path, n_neighbors: int = PTE_NEIGHBORS) -> PTEResult:
    """Perpendicular distance of each repeat position to a line fit through its
    nearest teach positions."""
    T = _positions(teach_path)
    Q = _positions(repeat_path)
    if len(T) < 2 or len(Q) == 0:
        raise ValueError("need >= 2 teach points and >= 1 repeat point")
    n = min(n_neighbors, len(T))
    errs = np.empty(len(Q))
    for start in range(0, len(Q), 512):
        q = Q[start:start + 512]
        d2 = np.sum((q[:, None, :] - T[None]) ** 2, axis=2)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :n]
        P = T[nn]                                   # (b, n, 3)
        c = P.mean(axis=1, keepdims=True)
        _, s, Vt = np.linalg.svd(P - c)
        if np.any(s[:, 0] < 1e-12):
            raise DegenerateFitError("nearest teach points are coincident")
        u = Vt[:, 0, :]
        r = q - c[:, 0]
        perp = r - np.sum(r * u, axis=1, keepdims=True) * u
        errs[start:start + len(q)] = np.linalg.norm(perp, axis=1)
    return PTEResult(errs, float(errs.mean()), float(errs.std()), float(errs.max()))


# -- reports --------------------------------------------------------------------------

def _occluded_mask(scenario, result: RepeatResult):
    ev = [e for e in scenario.occlusion_events() if e.repeat is None or e.repeat == result.index]
    if not ev:
        return np.zeros(len(result.logs), bool)
    t = np.array([rec.t for rec in result.logs])
    return np.any([(t >= e.start) & (t < e.end) for e in ev], axis=0)


def repeat_summary(scenario, map_: TopoMetricMap, result: RepeatResult, log_name: str) -> dict:
    row = {
        "index": result.index,
        "direction": "reverse" if result.reverse else "forward",
        "completion": result.completion,
        "ticks": len(result.logs),
        "duration": round(len(result.logs) * scenario.step_dt, 9),
        "switches": result.switch_counts(),
        "log": log_name,
        "lost_at": None,
        "pte": None,
        "estimated_pte": None,
        "occluded_pte_mean": None,
    }
    if result.completion == "lost":
        row["lost_at"] = round(result.logs[-1].t, 9)
    if result.logs:
        pte = compute_pte(map_.truth, result.truth)
        row["pte"] = pte.to_dict()
        est = [p for p in result.estimates if p is not None]
        if est:
            row["estimated_pte"] = compute_pte(map_.path, est).to_dict()
        occ = _occluded_mask(scenario, result)
        if occ.any():
            row["occluded_pte_mean"] = float(pte.errors[occ].mean())
    return row


def write_jsonl(path, result: RepeatResult):
    with open(path, "w") as fh:
        for rec in result.logs:
            fh.write(json.dumps(rec.to_dict(result.index), sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


CPM_BASE_COLUMNS = ["keyframe", "camera", "x", "y", "z"]


def cpm_columns(tags):
    cols = list(CPM_BASE_COLUMNS)
    for tag in tags:
        cols += [f"mu_{tag}", f"sigma_{tag}", f"support_{tag}"]
    return cols


def cpm_csv(map_: TopoMetricMap) -> str:
    """One row per keyframe along the path; blank cells where a camera has no entry."""
    tags = list(map_.cameras)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cpm_columns(tags))
    for kf in map_.keyframes:
        row = [kf.id, kf.camera, *(repr(float(v)) for v in kf.T_MB.t)]
        for tag in tags:
            e = kf.cpm.get(tag)
            row += [repr(e.mu), repr(e.sigma), e.support] if e else ["", "", ""]
        w.writerow(row)
    return buf.getvalue()


def save_truth(map_: TopoMetricMap, path):
    data = {"times": list(map_.path_times), "poses": [p.to_list() for p in map_.truth]}
    Path(path).write_text(json.dumps(data, separators=(",", ":")))


def load_truth(map_: TopoMetricMap, path):
    data = json.loads(Path(path).read_text())
    map_.truth = [Pose.from_list(p) for p in data["poses"]]
    return map_


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# -- pipeline -----------------------------------------------------------------------------

def teach_and_learn(scenario, world=None):
    world = world if world is not None else scenario.build_world()
    map_ = run_teach(scenario, world)
    learn_cpm(map_, scenario.cpm_hyper())
    return world, map_


def run_repeats(scenario, world, map_, out: Optional[Path], repeats: Optional[int] = None,
                lock_camera: Optional[str] = None, prefix: str = "repeat"):
    rows, results = [], []
    for i in range(scenario.repeats if repeats is None else repeats):
        res = run_repeat(scenario, world, map_, i, lock_camera)
        name = f"{prefix}_{i}.jsonl"
        if out is not None:
            write_jsonl(out / name, res)
        rows.append(repeat_summary(scenario, map_, res, name))
        results.append(res)
    return rows, results


def overall_completion(rows):
    if any(r["completion"] == "lost" for r in rows):
        return "lost"
    if any(r["completion"] != "success" for r in rows):
        return "timeout"
    return "success"


def build_report(scenario, map_, rows, lock_camera=None) -> dict:
    totals = {r.value: 0 for r in Reason}
    for row in rows:
        for k, v in row["switches"].items():
            totals[k] += v
    return {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "cameras": list(map_.cameras),
        "locked_camera": lock_camera,
        "teach": {"keyframes": len(map_.keyframes), "samples": len(map_.samples),
                  "duration": map_.path_times[-1] if map_.path_times else 0.0},
        "repeats": rows,
        "switch_totals": totals,
        "completion": overall_completion(rows),
    }


def run_scenario(scenario, out=None, repeats: Optional[int] = None,
                 lock_camera: Optional[str] = None) -> dict:
    """teach -> learn -> repeats; writes artifacts under ``out`` when given."""
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    world, map_ = teach_and_learn(scenario)
    if out is not None:
        save_map(map_, out / "map.json")
        save_truth(map_, out / "teach_truth.json")
        (out / "cpm.csv").write_text(cpm_csv(map_))
    rows, _ = run_repeats(scenario, world, map_, out, repeats, lock_camera)
    report = build_report(scenario, map_, rows, lock_camera)
    if out is not None:
        dump_json(report, out / "report.json")
    return report


def _occluded_pte(report):
    vals = [r["occluded_pte_mean"] for r in report["repeats"] if r["occluded_pte_mean"] is not None]
    return float(np.mean(vals)) if vals else None


def compare_baseline(scenario, out=None, lock_camera: Optional[str] = None,
                     repeats: Optional[int] = None) -> dict:
    """Same seeded scenario with active selection and locked to one camera."""
    lock = lock_camera or (scenario.occlusions[0].camera if scenario.occlusions
                           else scenario.cameras[0].tag)
    out = Path(out) if out is not None else None
    world, map_ = teach_and_learn(scenario)
    arms = {}
    for arm, cam in (("active", None), ("locked", lock)):
        sub = None
        if out is not None:
            sub = out / arm
            sub.mkdir(parents=True, exist_ok=True)
        rows, _ = run_repeats(scenario, world, map_, sub, repeats, cam)
        rep = build_report(scenario, map_, rows, cam)
        if sub is not None:
            dump_json(rep, sub / "report.json")
        arms[arm] = rep
    a, b = _occluded_pte(arms["active"]), _occluded_pte(arms["locked"])
    mean = lambda rep: (float(np.mean([r["pte"]["mean"] for r in rep["repeats"] if r["pte"]]))
                        if any(r["pte"] for r in rep["repeats"]) else None)
    summary = {
        "locked_camera": lock,
        "active": {"completion": arms["active"]["completion"], "pte_mean": mean(arms["active"]),
                   "occluded_pte_mean": a},
        "locked": {"completion": arms["locked"]["completion"], "pte_mean": mean(arms["locked"]),
                   "occluded_pte_mean": b},
        "occluded_pte_ratio": (b / a) if (a and b is not None) else None,
    }
    result = {"summary": summary, "active": arms["active"], "locked": arms["locked"]}
    if out is not None:
        dump_json(summary, out / "comparison.json")
    return result
