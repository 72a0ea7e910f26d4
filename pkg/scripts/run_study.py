"""Run the robot-vs-manual comparison study and print the cohort report.

Usage:
    python3 scripts/run_study.py --scene-seed 1 --n-robot 10 --n-manual 11

Equivalent to `lungsteer study`, but also prints a human-readable table.
"""

import argparse
import json
from pathlib import Path

from lungsteer.anatomy import generate_scene
from lungsteer.engine import run_comparison_study, save_record


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene-seed", type=int, default=1)
    ap.add_argument("--n-robot", type=int, default=10)
    ap.add_argument("--n-manual", type=int, default=11)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-insert", type=float, default=30.0,
                    help="manual straight-needle depth cap (mm)")
    ap.add_argument("-o", "--out", type=Path, default=None)
    args = ap.parse_args()

    scene = generate_scene(args.scene_seed)
    report, records = run_comparison_study(
        scene, n_robot=args.n_robot, n_manual=args.n_manual,
        seed=args.seed, max_insert=args.max_insert)

    def line(label, robot, manual, test):
        t, p = test
        print(f"{label:12s} robot {robot.mean:6.1f} +- {robot.sd:5.1f} "
              f"(n={robot.n})   manual {manual.mean:6.1f} +- {manual.sd:5.1f} "
              f"(n={manual.n})   t={t:+.2f}  p={p:.2e}")

    line("length (mm)", report.robot_length, report.manual_length,
         report.length_test)
    line("error (mm)", report.robot_error, report.manual_error,
         report.error_test)

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2))
        (args.out / "report.csv").write_text(report.to_csv_str())
        rec_dir = args.out / "records"
        rec_dir.mkdir(exist_ok=True)
        for i, rec in enumerate(records):
            save_record(rec, rec_dir / f"{i:03d}_{rec.kind}.json")
        print(f"wrote {args.out}/report.{{json,csv}} and "
              f"{len(records)} records")


if __name__ == "__main__":
    main()
