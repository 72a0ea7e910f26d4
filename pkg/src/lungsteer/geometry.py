"""Rigid-body poses and constant-curvature arc propagation.

Conventions used throughout the package:
  * lengths in millimeters, angles in radians
  * a pose's heading is the +z column of its rotation matrix
  * roll = 0 bends the needle toward the tip-frame +x axis
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9

# Curvatures below this are treated as exactly straight.  The closed-form
# lateral offset at kappa=1e-9, s=100 is ~5e-6 mm, i.e. far below any
# clearance or tracking tolerance in this package.
KAPPA_EPS = 1e-8


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {a.shape}")
    return a


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol)


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = _as_vec3(axis)
    n = np.linalg.norm(axis)
    if n < 1e-15:
        return np.eye(3)
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = (-a + np.pi) % (2 * np.pi)
    return float(np.pi - w)


@dataclass(frozen=True)
class Pose:
    """Rigid transform / frame: x_world = R @ x_local + p."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "p", _as_vec3(self.p))
        R = np.asarray(self.R, dtype=float)
        if not is_rotation(R, tol=1e-6):
            raise ValueError("Pose rotation is not orthonormal with det +1")
        object.__setattr__(self, "R", R)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @property
    def heading(self) -> np.ndarray:
        """Unit direction the frame points along (+z column)."""
        return self.R[:, 2].copy()

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.p + self.R @ other.p, self.R @ other.R)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(-Rt @ self.p, Rt)

    def apply(self, points) -> np.ndarray:
        """Map local point(s) to world: supports (3,) and (N, 3)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.R @ pts + self.p
        return pts @ self.R.T + self.p

    def apply_dir(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if d.ndim == 1:
            return self.R @ d
        return d @ self.R.T

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (np.abs(self.p - other.p).max() < tol
                and np.abs(self.R - other.R).max() < tol)


@dataclass(frozen=True)
class Arc:
    """Constant-curvature arc: insert `arclength` mm at curvature `curvature`
    in the bend plane selected by `roll` (in the start-tip frame)."""

    start: Pose
    curvature: float
    arclength: float
    roll: float

    def __post_init__(self):
        if self.curvature < 0:
            raise ValueError("curvature must be >= 0")
        if self.arclength <= 0:
            raise ValueError("arclength must be > 0")

    @property
    def end(self) -> Pose:
        return propagate_arc(self.start, self.curvature, self.roll,
                             self.arclength)

    def point_at(self, s: float) -> np.ndarray:
        return propagate_arc(self.start, self.curvature, self.roll, s).p

    def points(self, ds: float, include_start: bool = True) -> np.ndarray:
        """Sample positions along the arc at spacing <= ds (both ends
        included), vectorized."""
        n = max(1, int(np.ceil(self.arclength / ds)))
        s = np.linspace(0.0, self.arclength, n + 1)
        if not include_start:
            s = s[1:]
        return arc_positions(self.start, self.curvature, self.roll, s)


def _arc_local(curvature: float, roll: float, s: float):
    """Local displacement and rotation of an arc in the start-tip frame."""
    if curvature < KAPPA_EPS:
        return np.array([0.0, 0.0, s]), np.eye(3)
    theta = curvature * s
    r = 1.0 / curvature
    p_bend = np.array([r * (1.0 - np.cos(theta)), 0.0, r * np.sin(theta)])
    Rz = rot_z(roll)
    return Rz @ p_bend, Rz @ rot_y(theta) @ Rz.T


def propagate_arc(start: Pose, curvature: float, roll: float,
                  s: float) -> Pose:
    """Pose after inserting arclength s along a constant-curvature arc.

    curvature = 0 is pure translation along the tip heading; the degenerate
    case is handled analytically, never by division.
    """
    if curvature < 0:
        raise ValueError("curvature must be >= 0")
    if s < 0:
        raise ValueError("arclength must be >= 0")
    p_loc, R_loc = _arc_local(curvature, roll, s)
    return Pose(start.p + start.R @ p_loc, start.R @ R_loc)


def arc_positions(start: Pose, curvature: float, roll: float,
                  s) -> np.ndarray:
    """Positions along an arc for an array of arclengths (vectorized)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if curvature < KAPPA_EPS:
        local = np.zeros((len(s), 3))
        local[:, 2] = s
    else:
        theta = curvature * s
        r = 1.0 / curvature
        bend = np.stack([r * (1.0 - np.cos(theta)),
                         np.zeros_like(theta),
                         r * np.sin(theta)], axis=1)
        local = bend @ rot_z(roll).T
    return local @ start.R.T + start.p


def heading_pose(position, heading) -> Pose:
    """Deterministic frame with +z along `heading` (transverse basis fixed
    by a canonical reference vector)."""
    heading = np.asarray(heading, dtype=float)
    heading = heading / np.linalg.norm(heading)
    x = np.cross(heading, [0.029, 1.0, 0.053])
    x /= np.linalg.norm(x)
    y = np.cross(heading, x)
    return Pose(np.asarray(position, dtype=float),
                np.stack([x, y, heading], axis=1))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """T such that a.compose(T) == b."""
    return a.inverse().compose(b)


def angular_deviation(d1, d2) -> float:
    """Angle in [0, pi] between two unit directions."""
    d1 = _as_vec3(d1)
    d2 = _as_vec3(d2)
    for d in (d1, d2):
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("angular_deviation requires unit vectors")
    return float(np.arccos(np.clip(d1 @ d2, -1.0, 1.0)))


def steer_to_point(start: Pose, target) -> tuple[float, float, float]:
    """Roll, curvature and arclength of the unique constant-curvature arc
    from `start` (tangent to its heading) through `target`.

    Returns (roll, curvature, arclength).  Raises ValueError when the target
    lies behind the start plane or on the start point.
    """
    target = _as_vec3(target)
    local = start.R.T @ (target - start.p)
    d_xy = float(np.hypot(local[0], local[1]))
    z = float(local[2])
    dist2 = d_xy * d_xy + z * z
    if dist2 < 1e-12:
        raise ValueError("target coincides with start")
    if z <= 0 and d_xy < 1e-9:
        raise ValueError("target directly behind start")
    kappa = 2.0 * d_xy / dist2
    if kappa < KAPPA_EPS:
        if z <= 0:
            raise ValueError("target behind start plane")
        return 0.0, 0.0, z
    roll = float(np.arctan2(local[1], local[0]))
    # Subtended angle from the chord: tan(theta/2) = d_xy / z.
    theta = 2.0 * float(np.arctan2(d_xy, z))
    arclength = theta / kappa
    return roll, kappa, arclength
