"""Run one deployment and save a three-panel figure: 3D planned vs
tracked trajectory, breath trace with hold-window shading, and the
paired trajectory-error series.

Usage:
    python3 scripts/plot_deployment.py --scene-seed 1 --target-seed 800 \\
        --seed 0 --profile in_vivo -o deployment.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from lungsteer.anatomy import generate_scene, sample_target  # noqa: E402
from lungsteer.control import segment_point_at  # noqa: E402
from lungsteer.engine import (  # noqa: E402
    PROFILES,
    run_deployment,
    targeting_error,
    trajectory_error_series,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scene-seed", type=int, default=1)
    ap.add_argument("--target-seed", type=int, default=800)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--profile", choices=sorted(PROFILES),
                    default="in_vivo")
    ap.add_argument("-o", "--out", default="deployment.png")
    args = ap.parse_args()

    scene = generate_scene(args.scene_seed)
    target = sample_target(scene, args.target_seed)
    rec = run_deployment(scene, target, PROFILES[args.profile],
                         seed=args.seed)
    print(f"status={rec.status} targeting_error="
          f"{targeting_error(rec):.2f} mm")

    rows = np.array(rec.rows, dtype=float)
    path = list(rec.executed_plan.needle_path)
    total = sum(a.arclength for a in path)
    planned = np.array([segment_point_at(path, s)
                        for s in np.linspace(0.0, total, 200)])

    fig = plt.figure(figsize=(13, 4))
    ax = fig.add_subplot(1, 3, 1, projection="3d")
    ax.plot(*planned.T, "k--", lw=1, label="planned")
    ax.plot(rows[:, 1], rows[:, 2], rows[:, 3], "b-", lw=1,
            label="tracked")
    ax.scatter(*rec.target, c="r", marker="*", s=80, label="target")
    ax.set_title("trajectory (mm)")
    ax.legend(fontsize=8)

    ax = fig.add_subplot(1, 3, 2)
    if rec.breath_trace:
        bt = np.array(rec.breath_trace, dtype=float)
        ax.plot(bt[:, 0], bt[:, 1], "g-", lw=0.8)
    open_t = rows[rows[:, 7] > 0.5, 0]
    for t in open_t:
        ax.axvspan(t, t + 0.05, color="0.85", zorder=0)
    ax.set_xlabel("t (s)")
    ax.set_title("chest marker, hold windows shaded")

    ax = fig.add_subplot(1, 3, 3)
    series = trajectory_error_series(rec)
    t = [s[0] for s in series]
    e = [s[1] for s in series]
    ax.plot(t, e, "b.-", ms=3, lw=0.8)
    ax.axhline(targeting_error(rec), color="r", ls=":",
               label=f"final {targeting_error(rec):.2f} mm")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("paired error (mm)")
    ax.set_title("trajectory error")
    ax.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(args.out, dpi=130)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
