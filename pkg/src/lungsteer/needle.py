"""Ground-truth bevel-tip needle kinematics and the roll-less 5-DOF tip
sensing model.

The needle curves at its nominal curvature in the bend plane set by the
bevel roll whenever it is inserted; axial spin reorients the bevel.  A
5-DOF electromagnetic coil senses tip position and heading but never roll,
which is why the controller carries its own roll estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .geometry import Pose, propagate_arc, rotation_about_axis, wrap_angle
from .registration import RigidTransform


@dataclass(frozen=True)
class NeedleState:
    tip: Pose          # scene (CT) frame
    inserted: float    # mm, non-decreasing
    roll: float        # rad, true bevel orientation


@dataclass(frozen=True)
class TipMeasurement:
    """5-DOF sample in the EM frame.  Deliberately has no roll field."""

    position: np.ndarray
    heading: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class NoiseConfig:
    curvature_noise: float = 0.0        # relative std on executed curvature
    heading_random_walk: float = 0.0    # rad / sqrt(mm)
    em_position_noise: float = 0.0      # mm std per axis
    em_heading_noise: float = 0.0       # rad std

    def __post_init__(self):
        for name in ("curvature_noise", "heading_random_walk",
                     "em_position_noise", "em_heading_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @staticmethod
    def zero() -> "NoiseConfig":
        return NoiseConfig()


# Calibrated so that 50-seed deployments land in the in vivo error range
# reported for the physical system (median a few mm).
IN_VIVO_NOISE = NoiseConfig(
    curvature_noise=0.15,
    heading_random_walk=0.004,
    em_position_noise=0.35,
    em_heading_noise=0.01,
)


def step(state: NeedleState, insert_v: float, spin_w: float, dt: float,
         kappa_nominal: float, noise: NoiseConfig, rng) -> NeedleState:
    """Advance the true needle state by one control interval.

    Spin is applied first, then (if inserting) the tip propagates along a
    noisy constant-curvature arc in the bend plane set by the new roll,
    followed by a heading random walk scaled by sqrt(arclength).
    """
    if insert_v < 0:
        raise PreconditionError("no retraction: insert_v must be >= 0")
    if dt <= 0:
        raise PreconditionError("dt must be > 0")
    roll = wrap_angle(state.roll + spin_w * dt)
    if insert_v == 0:
        return NeedleState(state.tip, state.inserted, roll)
    s = insert_v * dt
    kappa = kappa_nominal
    if noise.curvature_noise > 0:
        kappa = max(0.0, kappa_nominal *
                    (1.0 + noise.curvature_noise * rng.standard_normal()))
    tip = propagate_arc(state.tip, kappa, roll, s)
    if noise.heading_random_walk > 0:
        ang = noise.heading_random_walk * np.sqrt(s) * rng.standard_normal()
        az = rng.uniform(0, 2 * np.pi)
        # random axis perpendicular to the heading
        axis = tip.R @ (np.array([np.cos(az), np.sin(az), 0.0]))
        tip = Pose(tip.p, rotation_about_axis(axis, ang) @ tip.R)
    return NeedleState(tip, state.inserted + s, roll)


def sense(state: NeedleState, reg: RigidTransform, noise: NoiseConfig,
          rng, t: float = 0.0) -> TipMeasurement:
    """5-DOF EM measurement of the tip.

    `reg` maps EM-frame points into the scene frame, so sensing applies its
    inverse.  Roll is structurally unobservable.
    """
    pos = reg.inverse().apply(state.tip.p)
    heading = reg.inverse().apply_dir(state.tip.heading)
    if noise.em_position_noise > 0:
        pos = pos + rng.normal(0.0, noise.em_position_noise, size=3)
    if noise.em_heading_noise > 0:
        ang = noise.em_heading_noise * rng.standard_normal()
        az = rng.uniform(0, 2 * np.pi)
        perp = np.cross(heading, [0.033, 1.0, 0.071])
        perp /= max(np.linalg.norm(perp), 1e-12)
        axis = rotation_about_axis(heading, az) @ perp
        heading = rotation_about_axis(axis, ang) @ heading
    heading = heading / np.linalg.norm(heading)
    return TipMeasurement(pos, heading, t)
