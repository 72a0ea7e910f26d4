"""Command-line entry points: scene generation, planning, simulation,
studies, replay, plan validation, and the session service.

Exit codes: 0 success, 1 domain error (no plan, failed validation,
replay mismatch, ...), 2 usage or parse error.  Domain errors print a
single machine-parsable `error: <Type>: <message>` line to stderr, and
every subcommand echoes its full effective configuration at start so a
run can be reproduced from its output alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import anatomy, engine, planner
from .errors import ConfigurationError, LungsteerError

PROFILE_NAMES = tuple(engine.PROFILES)


def _parse_target(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigurationError(f"target must be x,y,z, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise ConfigurationError(f"bad target {text!r}: {e}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(obj, overrides):
    """Apply dotted-path key=value overrides to nested frozen dataclasses.

    Unknown keys are rejected; values parse as JSON scalars with a plain
    string fallback.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        obj = _set_dotted(obj, keys, _parse_value(raw))
    return obj


def _set_dotted(obj, keys, value):
    if not dataclasses.is_dataclass(obj):
        raise ConfigurationError(
            f"cannot descend into non-config value at {keys[0]!r}")
    names = {f.name for f in dataclasses.fields(obj)}
    if keys[0] not in names:
        raise ConfigurationError(f"unknown override key {keys[0]!r}")
    if len(keys) == 1:
        return dataclasses.replace(obj, **{keys[0]: value})
    inner = _set_dotted(getattr(obj, keys[0]), keys[1:], value)
    return dataclasses.replace(obj, **{keys[0]: inner})


def _out_path(path: str) -> Path:
    """Resolve a path against the output root environment variable."""
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get("LUNGSTEER_OUT", ".")) / p


def _echo_config(name: str, cfg: dict) -> None:
    print(json.dumps({"command": name, "config": cfg}, sort_keys=True),
          file=sys.stderr)


# ------------------------------------------------------------ subcommands

def _cmd_scene(args) -> int:
    if args.action != "gen":
        raise ConfigurationError(f"unknown scene action {args.action!r}")
    _echo_config("scene gen", {"seed": args.seed, "out": args.out})
    scene = anatomy.generate_scene(args.seed)
    out = _out_path(args.out)
    anatomy.save_scene(scene, out)
    print(json.dumps({"scene": str(out),
                      "hash": anatomy.scene_hash(scene)}))
    return 0


def _cmd_plan(args) -> int:
    _echo_config("plan", {"scene": args.scene, "target": args.target,
                          "seed": args.seed, "k": args.k,
                          "out": args.out})
    scene = anatomy.load_scene(args.scene)
    target = _parse_target(args.target)
    plans = planner.plan_candidates(planner.PlanRequest(
        scene=scene, target=target, k=args.k, rng_seed=args.seed))
    doc = {
        "version": planner.PLAN_FORMAT_VERSION,
        "scene_hash": anatomy.scene_hash(scene),
        "plans": [planner.plan_to_dict(p, anatomy.scene_hash(scene),
                                       args.seed) for p in plans],
    }
    if args.out:
        with open(_out_path(args.out), "w") as f:
            json.dump(doc, f, indent=1)
    print(json.dumps({"candidates": len(plans),
                      "costs": [p.cost for p in plans]}))
    return 0


def _load_plan_file(path) -> list:
    with open(path) as f:
        doc = json.load(f)
    plans = doc["plans"] if "plans" in doc else [doc]
    return [planner.plan_from_dict(d) for d in plans]


def _cmd_validate(args) -> int:
    _echo_config("validate", {"plan": args.plan, "scene": args.scene})
    scene = anatomy.load_scene(args.scene)
    plans = _load_plan_file(args.plan)
    all_ok = True
    for i, plan in enumerate(plans):
        checks = planner.validate_plan(plan, scene)
        for item in ("continuity", "curvature", "clearance", "goal"):
            status = "pass" if checks[item] else "FAIL"
            print(f"plan {i} {item}: {status}")
        print(f"plan {i} min_clearance_mm: {checks['min_clearance_mm']:.3f}"
              f"  goal_error_mm: {checks['goal_error_mm']:.3f}")
        all_ok = all_ok and checks["ok"]
    if not all_ok:
        print("error: ValidationFailed: one or more checks failed",
              file=sys.stderr)
        return 1
    return 0


def _resolve_profile(args):
    profile = engine.PROFILES[args.profile]
    return apply_overrides(profile, args.set or [])


def _cmd_simulate(args) -> int:
    profile = _resolve_profile(args)
    _echo_config("simulate", {
        "scene": args.scene, "target": args.target, "seed": args.seed,
        "profile": dataclasses.asdict(profile), "out": args.out,
    })
    scene = anatomy.load_scene(args.scene)
    target = _parse_target(args.target)
    rec = engine.run_deployment(scene, target, profile, seed=args.seed)
    if args.out:
        engine.save_record(rec, _out_path(args.out))
    summary = {"status": rec.status,
               "adverse_events": rec.adverse_events}
    if rec.rows:
        summary["targeting_error_mm"] = engine.targeting_error(rec)
        summary["length_mm"] = rec.length_mm()
    print(json.dumps(summary))
    if rec.status != engine.STATUS_COMPLETED:
        print(f"error: DeploymentFailed: status={rec.status}",
              file=sys.stderr)
        return 1
    return 0


def _cmd_replay(args) -> int:
    _echo_config("replay", {"record": args.record, "scene": args.scene})
    scene = anatomy.load_scene(args.scene)
    rec = engine.load_record(args.record)
    if rec.scene_hash != anatomy.scene_hash(scene):
        raise ConfigurationError("record was produced on a different scene")
    again = engine.replay_deployment(scene, rec)
    identical = engine.records_equal(rec, again)
    summary = {"replay_identical": identical, "status": again.status}
    if again.rows:
        summary["targeting_error_mm"] = engine.targeting_error(again)
    print(json.dumps(summary))
    if not identical:
        print("error: ReplayMismatch: stored record does not reproduce",
              file=sys.stderr)
        return 1
    return 0


def _robot_job(payload) -> engine.DeploymentRecord:
    scene, target, profile, seed = payload
    return engine.run_deployment(scene, target, profile, seed=seed)


def _cmd_study(args) -> int:
    profile = _resolve_profile(args)
    _echo_config("study", {
        "scene": args.scene, "seed": args.seed, "n_robot": args.n_robot,
        "n_manual": args.n_manual, "jobs": args.jobs,
        "max_insert": args.max_insert,
        "profile": dataclasses.asdict(profile), "out": args.out,
    })
    scene = anatomy.load_scene(args.scene)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_needed = max(args.n_robot, args.n_manual)
    targets = engine.study_targets(scene, n_needed, args.seed)
    jobs = [(scene, targets[i], profile, args.seed * 1000 + i)
            for i in range(args.n_robot)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(_robot_job, jobs))
    else:
        records = [_robot_job(j) for j in jobs]
    for i in range(args.n_manual):
        records.append(engine.run_manual_baseline(
            scene, targets[i % n_needed], max_insert=args.max_insert,
            seed=args.seed * 1000 + i))
    report = engine.build_study_report([r for r in records if r.rows])
    rec_dir = out / "records"
    rec_dir.mkdir(exist_ok=True)
    for i, rec in enumerate(records):
        engine.save_record(rec, rec_dir / f"{i:03d}_{rec.kind}.json")
    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    with open(out / "report.csv", "w", newline="") as f:
        f.write(report.to_csv_str())
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_serve(args) -> int:
    _echo_config("serve", {"host": args.host, "port": args.port})
    from .service import serve_forever
    serve_forever(host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lungsteer")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", help="scene artifacts")
    sc.add_argument("action", choices=["gen"])
    sc.add_argument("--seed", type=int, required=True)
    sc.add_argument("-o", "--out", required=True)
    sc.set_defaults(func=_cmd_scene)

    pl = sub.add_parser("plan", help="compute candidate plans")
    pl.add_argument("--scene", required=True)
    pl.add_argument("--target", required=True)
    pl.add_argument("--seed", type=int, required=True)
    pl.add_argument("-k", type=int, default=4)
    pl.add_argument("-o", "--out")
    pl.set_defaults(func=_cmd_plan)

    va = sub.add_parser("validate", help="independent plan validation")
    va.add_argument("--plan", required=True)
    va.add_argument("--scene", required=True)
    va.set_defaults(func=_cmd_validate)

    si = sub.add_parser("simulate", help="run one deployment")
    si.add_argument("--scene", required=True)
    si.add_argument("--target", required=True)
    si.add_argument("--seed", type=int, required=True)
    si.add_argument("--profile", choices=PROFILE_NAMES, default="in_vivo")
    si.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="dotted-path profile override")
    si.add_argument("-o", "--out")
    si.set_defaults(func=_cmd_simulate)

    re = sub.add_parser("replay", help="re-execute a stored record")
    re.add_argument("--record", required=True)
    re.add_argument("--scene", required=True)
    re.set_defaults(func=_cmd_replay)

    st = sub.add_parser("study", help="robot vs manual comparison study")
    st.add_argument("--scene", required=True)
    st.add_argument("--seed", type=int, required=True)
    st.add_argument("--n-robot", type=int, default=10)
    st.add_argument("--n-manual", type=int, default=11)
    st.add_argument("--max-insert", type=float, default=30.0)
    st.add_argument("--jobs", type=int, default=1)
    st.add_argument("--profile", choices=PROFILE_NAMES, default="in_vivo")
    st.add_argument("--set", action="append", metavar="KEY=VALUE")
    st.add_argument("-o", "--out", required=True)
    st.set_defaults(func=_cmd_study)

    se = sub.add_parser("serve", help="run the session service")
    se.add_argument("--host", default="127.0.0.1")
    se.add_argument("--port", type=int, default=7313)
    se.set_defaults(func=_cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except LungsteerError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
