"""Run a seeded deployment battery and print summary statistics.

Usage:
    python3 scripts/run_battery.py --n 50 --profile in_vivo --scene-seed 1
    python3 scripts/run_battery.py --n 20 --profile noiseless -o out/

Each deployment i uses target sample seed (target-seed-base + i) and
deployment seed i, so any run can be reproduced individually with
`lungsteer simulate`.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from lungsteer.anatomy import generate_scene, sample_target
from lungsteer.engine import (
    PROFILES,
    STATUS_COMPLETED,
    run_deployment,
    save_record,
    targeting_error,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--profile", choices=sorted(PROFILES), default="in_vivo")
    ap.add_argument("--scene-seed", type=int, default=1)
    ap.add_argument("--target-seed-base", type=int, default=800)
    ap.add_argument("-o", "--out", type=Path, default=None,
                    help="directory for per-deployment record JSON")
    args = ap.parse_args()

    scene = generate_scene(args.scene_seed)
    profile = PROFILES[args.profile]
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)

    errors, statuses, adverse = [], {}, 0
    t0 = time.monotonic()
    for i in range(args.n):
        target = sample_target(scene, args.target_seed_base + i)
        rec = run_deployment(scene, target, profile, seed=i)
        statuses[rec.status] = statuses.get(rec.status, 0) + 1
        adverse += len(rec.adverse_events)
        if rec.status == STATUS_COMPLETED:
            errors.append(targeting_error(rec))
        if args.out:
            save_record(rec, args.out / f"{i:03d}.json")
        print(f"  [{i:3d}] {rec.status:18s} "
              f"err={errors[-1]:.2f} mm" if rec.status == STATUS_COMPLETED
              else f"  [{i:3d}] {rec.status}")
    elapsed = time.monotonic() - t0

    errors = np.array(errors)
    summary = {
        "n": args.n,
        "profile": args.profile,
        "statuses": statuses,
        "adverse_events": adverse,
        "error_median_mm": float(np.median(errors)) if len(errors) else None,
        "error_mean_mm": float(errors.mean()) if len(errors) else None,
        "error_max_mm": float(errors.max()) if len(errors) else None,
        "frac_under_5mm": float(np.mean(errors <= 5.0)) if len(errors)
        else None,
        "elapsed_s": round(elapsed, 1),
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
