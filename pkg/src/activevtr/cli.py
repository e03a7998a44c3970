"""Command line entry point: ``activevtr <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .cpm import learn_cpm
from .harness import (build_report, compare_baseline, compute_pte, cpm_csv, dump_json,
                      load_truth, read_jsonl, run_repeats, run_scenario, save_truth)
from .geometry import Pose
from .teach import MalformedMapError, MapVersionError, TeachFailure, load_map, run_teach, save_map

EXIT_OK, EXIT_FAIL, EXIT_LOST, EXIT_CONFIG = 0, 1, 2, 3


def _scenario(args):
    cfg = load_config(args.config)
    upd = {}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "repeats", None) is not None:
        upd["repeats"] = args.repeats
    if getattr(args, "lock_camera", None) is not None:
        upd["lock_camera"] = args.lock_camera
    if upd:
        try:
            cfg = type(cfg).model_validate({**cfg.model_dump(), **upd})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _out(args, cfg):
    out = Path(args.out or cfg.output_dir or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def _status(report):
    return EXIT_LOST if report["completion"] == "lost" else EXIT_OK


def cmd_teach(args):
    cfg = _scenario(args)
    out = _out(args, cfg)
    map_ = run_teach(cfg, cfg.build_world())
    save_map(map_, out / "map.json")
    save_truth(map_, out / "teach_truth.json")
    _print({"map": str(out / "map.json"), "keyframes": len(map_.keyframes),
            "samples": len(map_.samples)})
    return EXIT_OK


def cmd_learn(args):
    cfg = _scenario(args)
    map_ = load_map(args.map)
    learn_cpm(map_, cfg.cpm_hyper())
    dest = Path(args.out) if args.out else Path(args.map).parent
    dest.mkdir(parents=True, exist_ok=True)
    save_map(map_, dest / "map.json")
    (dest / "cpm.csv").write_text(cpm_csv(map_))
    _print({"map": str(dest / "map.json"), "entries": sum(len(k.cpm) for k in map_.keyframes)})
    return EXIT_OK


def cmd_repeat(args):
    cfg = _scenario(args)
    out = _out(args, cfg)
    map_ = load_map(args.map)
    truth = Path(args.truth) if args.truth else Path(args.map).parent / "teach_truth.json"
    load_truth(map_, truth)
    rows, _ = run_repeats(cfg, cfg.build_world(), map_, out, None, cfg.lock_camera)
    report = build_report(cfg, map_, rows, cfg.lock_camera)
    dump_json(report, out / "report.json")
    _print(report)
    return _status(report)


def cmd_run(args):
    cfg = _scenario(args)
    out = _out(args, cfg)
    report = run_scenario(cfg, out, lock_camera=cfg.lock_camera)
    _print(report)
    return _status(report)


def cmd_compare(args):
    cfg = _scenario(args)
    out = _out(args, cfg)
    res = compare_baseline(cfg, out, args.lock_camera)
    _print(res["summary"])
    return _status(res["active"])


def cmd_pte(args):
    teach = json.loads(Path(args.teach).read_text())
    if isinstance(teach, dict) and "path" in teach:     # a map file: odometry-frame path
        teach_poses = teach["path"]["poses"]
    elif isinstance(teach, dict):
        teach_poses = teach["poses"]
    else:
        teach_poses = teach
    recs = read_jsonl(args.repeat)
    key = "estimate" if args.estimated else "truth"
    rep = [r[key] for r in recs if r.get(key) is not None]
    res = compute_pte([Pose.from_list(p) for p in teach_poses], [Pose.from_list(p) for p in rep],
                      args.neighbors)
    _print({**res.to_dict(), "poses": len(rep)})
    return EXIT_OK


def cmd_dump_cpm(args):
    text = cpm_csv(load_map(args.map))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="activevtr",
                                description="Multi-camera visual teach and repeat simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, repeats=False, lock=False):
        sp.add_argument("--config", required=True, help="scenario JSON or bundled fixture name")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if repeats:
            sp.add_argument("--repeats", type=int)
        if lock:
            sp.add_argument("--lock-camera", dest="lock_camera")

    sp = sub.add_parser("teach", help="run the teach pass and write map.json")
    common(sp)
    sp.set_defaults(func=cmd_teach)

    sp = sub.add_parser("learn", help="fit camera performance models into a map")
    common(sp)
    sp.add_argument("--map", required=True)
    sp.set_defaults(func=cmd_learn)

    sp = sub.add_parser("repeat", help="repeat runs against an existing map")
    common(sp, repeats=True, lock=True)
    sp.add_argument("--map", required=True)
    sp.add_argument("--truth", help="teach ground truth (default: teach_truth.json next to the map)")
    sp.set_defaults(func=cmd_repeat)

    sp = sub.add_parser("run", help="teach, learn and repeat in one go")
    common(sp, repeats=True, lock=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare-baseline", help="active selection vs a single locked camera")
    common(sp, repeats=True, lock=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("pte", help="path tracking error of a repeat log against teach truth")
    sp.add_argument("--teach", required=True, help="teach_truth.json, or map.json together with --estimated")
    sp.add_argument("--repeat", required=True, help="repeat_<i>.jsonl")
    sp.add_argument("--neighbors", type=int, default=6)
    sp.add_argument("--estimated", action="store_true", help="use logged estimates instead of truth")
    sp.set_defaults(func=cmd_pte)

    sp = sub.add_parser("dump-cpm", help="write the CPM table of a map as CSV")
    sp.add_argument("--map", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_cpm)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MalformedMapError, MapVersionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except TeachFailure as exc:
        print(f"teach failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
