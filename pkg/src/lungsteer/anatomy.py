"""Synthetic lung scenes: airway tree, vessel obstacles, pleural boundary,
target regions and fiducials, plus exact clearance queries.

Scenes stand in for a segmented CT volume.  All geometry lives in the CT
frame in millimeters.  Vessels and airway walls are capsules (exact
distance); the pleura is an ellipsoid by default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InfeasibleRegionError
from .geometry import Pose, rotation_about_axis

OBSTACLE_VESSEL = "vessel"
OBSTACLE_AIRWAY = "airway_wall"
OBSTACLE_PLEURA = "pleura"

# Canonical 7-sphere divot pattern of a fiducial, in its coil frame (mm).
FIDUCIAL_SPHERES = np.array([
    [10.0, 0.0, 0.0],
    [-10.0, 0.0, 0.0],
    [0.0, 10.0, 0.0],
    [0.0, -10.0, 0.0],
    [0.0, 0.0, 10.0],
    [7.0, 7.0, 5.0],
    [-7.0, 7.0, 5.0],
])


@dataclass(frozen=True)
class FiducialModel:
    """Chest-wall fiducial: a 6-DOF coil plus seven calibration spheres."""

    coil_pose: Pose
    sphere_centers: np.ndarray  # (7, 3), coil frame

    def __post_init__(self):
        centers = np.asarray(self.sphere_centers, dtype=float)
        if centers.shape != (7, 3):
            raise ConfigurationError("fiducial needs exactly 7 sphere centers")
        d = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
        if d[np.triu_indices(7, 1)].min() < 2.0:
            raise ConfigurationError("fiducial spheres closer than 2 mm")
        object.__setattr__(self, "sphere_centers", centers)

    def spheres_in_world(self) -> np.ndarray:
        return self.coil_pose.apply(self.sphere_centers)


@dataclass(frozen=True)
class SceneParams:
    pleura_semi_axes: tuple = (60.0, 50.0, 85.0)
    tree_depth: int = 4
    root_length: float = 30.0
    root_radius: float = 6.0
    branch_length_factor: float = 0.78
    branch_radius_factor: float = 0.62
    branch_angle_range: tuple = (0.35, 0.8)  # rad
    vessel_probability: float = 0.75
    vessel_radius_factor: float = 0.55
    n_extra_vessels: int = 4
    n_target_regions: int = 3
    region_half_size: tuple = (11.0, 11.0, 11.0)
    region_radial_range: tuple = (0.5, 0.72)
    n_fiducials: int = 2
    kappa_max: float = 0.02
    clearance_min: float = 1.0

    def validate(self):
        if self.tree_depth < 2:
            raise ConfigurationError("tree_depth must be >= 2")
        if min(self.pleura_semi_axes) <= 0:
            raise ConfigurationError("pleura semi-axes must be positive")
        if self.clearance_min <= 0:
            raise ConfigurationError("clearance_min must be > 0")


@dataclass(frozen=True)
class Scene:
    """Immutable synthetic lung world in the CT frame."""

    seed: int
    pleura_center: np.ndarray
    pleura_semi_axes: np.ndarray
    airway_nodes: np.ndarray     # (N, 3)
    airway_radii: np.ndarray     # (N,)
    airway_edges: tuple          # ((parent, child), ...)
    vessels: tuple               # ((p0, p1, radius), ...) as tuples
    target_regions: tuple        # ((lo, hi), ...) axis-aligned boxes
    fiducials: tuple             # FiducialModel
    kappa_max: float
    clearance_min: float

    # cached obstacle segment arrays, filled lazily
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def _segments(self):
        if "segs" not in self._cache:
            v0 = np.array([v[0] for v in self.vessels], dtype=float).reshape(-1, 3)
            v1 = np.array([v[1] for v in self.vessels], dtype=float).reshape(-1, 3)
            vr = np.array([v[2] for v in self.vessels], dtype=float)
            a0 = np.array([self.airway_nodes[i] for i, _ in self.airway_edges])
            a1 = np.array([self.airway_nodes[j] for _, j in self.airway_edges])
            ar = np.array([max(self.airway_radii[i], self.airway_radii[j])
                           for i, j in self.airway_edges])
            self._cache["segs"] = (v0, v1, vr, a0, a1, ar)
        return self._cache["segs"]

    def _fused_segments(self):
        """All capsule obstacles concatenated: (starts, axis vecs, 1/len2,
        radii).  Precomputed once; used by the clearance fast path."""
        if "fused" not in self._cache:
            v0, v1, vr, a0, a1, ar = self._segments()
            s0 = np.concatenate([v0, a0])
            d = np.concatenate([v1, a1]) - s0
            inv_len2 = 1.0 / np.maximum((d * d).sum(axis=1), 1e-18)
            self._cache["fused"] = (s0, d, inv_len2, np.concatenate([vr, ar]))
        return self._cache["fused"]

    @property
    def airway_children(self):
        if "children" not in self._cache:
            ch = {}
            for i, j in self.airway_edges:
                ch.setdefault(i, []).append(j)
            self._cache["children"] = ch
        return self._cache["children"]

    def edge_length(self, edge) -> float:
        i, j = edge
        return float(np.linalg.norm(self.airway_nodes[j] - self.airway_nodes[i]))


def _segment_distances(pts: np.ndarray, s0: np.ndarray, s1: np.ndarray
                       ) -> np.ndarray:
    """Distances from pts (N,3) to segments (M,3)-(M,3), shape (N, M)."""
    if len(s0) == 0:
        return np.full((len(pts), 0), np.inf)
    d = s1 - s0                                     # (M,3)
    len2 = np.maximum((d * d).sum(axis=1), 1e-18)   # (M,)
    w = pts[:, None, :] - s0[None, :, :]            # (N,M,3)
    t = np.clip((w * d[None]).sum(axis=2) / len2, 0.0, 1.0)
    closest = s0[None] + t[..., None] * d[None]
    return np.linalg.norm(pts[:, None, :] - closest, axis=2)


def ellipsoid_signed_distance(center, semi_axes, pts) -> np.ndarray:
    """Distance from pts to an ellipsoid surface, positive inside.

    Solves the closest-point Lagrange condition per point by bisection;
    accurate to ~1e-9 mm.
    """
    semi = np.asarray(semi_axes, dtype=float)
    q = np.abs(np.atleast_2d(np.asarray(pts, dtype=float)) - center)
    q = np.maximum(q, 1e-9)
    a2 = semi * semi
    inside = ((q / semi) ** 2).sum(axis=1) < 1.0

    # Newton on the (convex, decreasing) Lagrange condition G(t) = 1.
    # Starting from t0 = max_j(a_j q_j - a_j^2), where G >= 1, the iterates
    # increase monotonically to the root.
    sq = semi * q
    t = (sq - a2).max(axis=1)
    for _ in range(60):
        r2 = (sq / (a2 + t[:, None])) ** 2
        f = r2.sum(axis=1) - 1.0
        fp = -2.0 * (r2 / (a2 + t[:, None])).sum(axis=1)
        step = f / fp
        t = t - step
        if np.abs(step).max() < 1e-12:
            break
    x = a2 * q / (a2 + t[:, None])
    d = np.linalg.norm(x - q, axis=1)
    return np.where(inside, d, -d)


def distance_to_obstacles_batch(scene: Scene, pts) -> tuple:
    """Clearance and arg-min class for many points at once.

    Returns (distances (N,), classes list of str).  The exact pleura solve
    runs only where a cheap interior lower bound cannot already rule the
    pleura out as the nearest obstacle.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    v0, v1, vr, a0, a1, ar = scene._segments()
    dv = _segment_distances(pts, v0, v1) - vr[None]
    da = _segment_distances(pts, a0, a1) - ar[None]
    dvessel = dv.min(axis=1) if dv.shape[1] else np.full(len(pts), np.inf)
    dairway = da.min(axis=1) if da.shape[1] else np.full(len(pts), np.inf)
    semi = scene.pleura_semi_axes
    rho = np.sqrt((((pts - scene.pleura_center) / semi) ** 2).sum(axis=1))
    # interior bound: |grad rho| <= 1/a_min, so d >= (1 - rho) * a_min
    lower = (1.0 - rho) * semi.min()
    dcap = np.minimum(dvessel, dairway)
    need_exact = ~((rho < 1.0) & (lower >= dcap))
    dpleura = lower
    if need_exact.any():
        dpleura = lower.copy()
        dpleura[need_exact] = ellipsoid_signed_distance(
            scene.pleura_center, semi, pts[need_exact])
    stacked = np.stack([dvessel, dairway, dpleura], axis=1)
    idx = stacked.argmin(axis=1)
    names = (OBSTACLE_VESSEL, OBSTACLE_AIRWAY, OBSTACLE_PLEURA)
    return stacked[np.arange(len(pts)), idx], [names[i] for i in idx]


def distance_to_obstacles(scene: Scene, p) -> tuple:
    """Minimum signed clearance of a point over all obstacle classes.

    Returns (distance_mm, class).  Outside the pleura the distance is
    negative with class 'pleura'.
    """
    d, cls = distance_to_obstacles_batch(scene, np.asarray(p, dtype=float))
    return float(d[0]), cls[0]


def min_clearance(scene: Scene, pts) -> float:
    d, _ = distance_to_obstacles_batch(scene, pts)
    return float(d.min())


def clearance_batch(scene: Scene, pts) -> np.ndarray:
    """Minimum signed clearance per point, without class bookkeeping.

    Equivalent to the distances from `distance_to_obstacles_batch` but
    tuned for the many small queries issued during planning.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    s0, d, inv_len2, radii = scene._fused_segments()
    if len(s0):
        w = pts[:, None, :] - s0[None]
        t = np.einsum("nmk,mk->nm", w, d) * inv_len2
        np.clip(t, 0.0, 1.0, out=t)
        diff = w - t[..., None] * d[None]
        dcap = (np.sqrt(np.einsum("nmk,nmk->nm", diff, diff))
                - radii[None]).min(axis=1)
    else:
        dcap = np.full(len(pts), np.inf)
    semi = scene.pleura_semi_axes
    rel = (pts - scene.pleura_center) / semi
    rho = np.sqrt(np.einsum("nk,nk->n", rel, rel))
    lower = (1.0 - rho) * semi.min()
    need_exact = ~((rho < 1.0) & (lower >= dcap))
    if need_exact.any():
        lower = lower.copy()
        lower[need_exact] = ellipsoid_signed_distance(
            scene.pleura_center, semi, pts[need_exact])
    return np.minimum(dcap, lower)


def _pleura_margin(scene_center, semi, pts) -> np.ndarray:
    return ellipsoid_signed_distance(scene_center, semi, pts)


def generate_scene(seed: int, params: SceneParams | None = None) -> Scene:
    """Deterministically grow a synthetic lung scene from a seed."""
    params = params or SceneParams()
    params.validate()
    rng = np.random.default_rng(seed)
    center = np.zeros(3)
    semi = np.asarray(params.pleura_semi_axes, dtype=float)

    def margin(p):
        return float(_pleura_margin(center, semi, np.atleast_2d(p))[0])

    # ---- airway tree -----------------------------------------------------
    nodes = [np.array([0.0, 0.0, semi[2] * 0.9])]
    radii = [params.root_radius]
    edges = []

    def shrink_end(start, direction, length, radius):
        """Pull the branch end inward until it clears the pleura."""
        end = start + length * direction
        for _ in range(40):
            if margin(end) >= radius + 2.0:
                return end
            length *= 0.85
            end = start + length * direction
        return None

    def grow(node_idx, direction, length, radius, depth):
        if depth > params.tree_depth:
            return
        n_children = 1 if depth == 1 else 2
        for c in range(n_children):
            ang = rng.uniform(*params.branch_angle_range) if depth > 1 else \
                rng.uniform(0.05, 0.2)
            az = rng.uniform(0, 2 * np.pi)
            perp = np.cross(direction, [0.017, 1.0, 0.013])
            perp /= np.linalg.norm(perp)
            axis = rotation_about_axis(direction, az) @ perp
            d = rotation_about_axis(axis, ang) @ direction
            d /= np.linalg.norm(d)
            end = shrink_end(nodes[node_idx], d, length, radius)
            if end is None:
                continue
            nodes.append(end)
            radii.append(radius)
            child = len(nodes) - 1
            edges.append((node_idx, child))
            grow(child, d, length * params.branch_length_factor,
                 max(radius * params.branch_radius_factor, 0.8), depth + 1)

    grow(0, np.array([0.0, 0.0, -1.0]), params.root_length,
         params.root_radius, 1)

    node_arr = np.array(nodes)
    radii_arr = np.array(radii)

    # ---- vessels ---------------------------------------------------------
    vessels = []

    def clip_inside(p0, p1, r):
        for _ in range(30):
            m0, m1 = margin(p0), margin(p1)
            if m0 >= r + 1.0 and m1 >= r + 1.0:
                return p0, p1
            mid = 0.5 * (p0 + p1)
            if m0 < r + 1.0:
                p0 = 0.6 * p0 + 0.4 * mid
            if m1 < r + 1.0:
                p1 = 0.6 * p1 + 0.4 * mid
        return None

    for (i, j) in edges:
        if rng.uniform() > params.vessel_probability:
            continue
        a, b = node_arr[i], node_arr[j]
        axis = b - a
        axis = axis / max(np.linalg.norm(axis), 1e-9)
        perp = np.cross(axis, rng.normal(size=3))
        perp /= max(np.linalg.norm(perp), 1e-9)
        r_air = max(radii_arr[i], radii_arr[j])
        r_v = max(r_air * params.vessel_radius_factor, 0.8)
        offset = (r_air + r_v + rng.uniform(2.0, 5.0)) * perp
        clipped = clip_inside(a + offset, b + offset, r_v)
        if clipped is not None:
            vessels.append((clipped[0], clipped[1], r_v))

    for _ in range(params.n_extra_vessels):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        c = center + rng.uniform(0.3, 0.6) * semi * u
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        half = rng.uniform(10.0, 25.0)
        r_v = rng.uniform(1.0, 2.5)
        clipped = clip_inside(c - half * d, c + half * d, r_v)
        if clipped is not None:
            vessels.append((clipped[0], clipped[1], r_v))

    # ---- target regions (peripheral cuboids) -----------------------------
    regions = []
    half = np.asarray(params.region_half_size, dtype=float)
    attempts = 0
    while len(regions) < params.n_target_regions and attempts < 500:
        attempts += 1
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        u[2] = -abs(u[2]) * 0.8  # bias toward the lower (distal) lung
        u /= np.linalg.norm(u)
        rho = rng.uniform(*params.region_radial_range)
        c = center + rho * semi * u
        lo, hi = c - half, c + half
        corners = np.array([[lo[0], lo[1], lo[2]], [lo[0], lo[1], hi[2]],
                            [lo[0], hi[1], lo[2]], [lo[0], hi[1], hi[2]],
                            [hi[0], lo[1], lo[2]], [hi[0], lo[1], hi[2]],
                            [hi[0], hi[1], lo[2]], [hi[0], hi[1], hi[2]]])
        if _pleura_margin(center, semi, corners).min() < 2.0:
            continue
        regions.append((lo, hi))

    # ---- fiducials on the chest wall -------------------------------------
    fiducials = []
    for k in range(params.n_fiducials):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        pos = center + 1.12 * semi * u
        z = -u  # coil faces the chest
        x = np.cross(z, rng.normal(size=3))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        fiducials.append(FiducialModel(Pose(pos, R), FIDUCIAL_SPHERES.copy()))

    scene = Scene(
        seed=int(seed),
        pleura_center=center,
        pleura_semi_axes=semi,
        airway_nodes=node_arr,
        airway_radii=radii_arr,
        airway_edges=tuple(edges),
        vessels=tuple((tuple(p0), tuple(p1), float(r))
                      for p0, p1, r in vessels),
        target_regions=tuple((tuple(lo), tuple(hi)) for lo, hi in regions),
        fiducials=tuple(fiducials),
        kappa_max=params.kappa_max,
        clearance_min=params.clearance_min,
    )
    return scene


def sample_target(scene: Scene, rng_seed: int, max_rejections: int = 10_000
                  ) -> np.ndarray:
    """Uniform draw over the target-region union, rejected until the point
    clears all obstacles by the scene's minimum clearance."""
    if not scene.target_regions:
        raise InfeasibleRegionError("scene has no target regions")
    rng = np.random.default_rng(rng_seed)
    lows = np.array([lo for lo, _ in scene.target_regions])
    highs = np.array([hi for _, hi in scene.target_regions])
    vols = np.prod(highs - lows, axis=1)
    weights = vols / vols.sum()
    for _ in range(max_rejections):
        i = rng.choice(len(weights), p=weights)
        p = rng.uniform(lows[i], highs[i])
        d, _ = distance_to_obstacles(scene, p)
        if d >= scene.clearance_min:
            return p
    raise InfeasibleRegionError(
        f"no clear target after {max_rejections} rejections")


def airway_medial_points(scene: Scene, spacing: float) -> np.ndarray:
    """Points along every airway branch at <= spacing intervals, including
    branch endpoints (duplicated junctions removed)."""
    if spacing <= 0:
        raise ConfigurationError("spacing must be > 0")
    pts = []
    for i, j in scene.airway_edges:
        a, b = scene.airway_nodes[i], scene.airway_nodes[j]
        length = np.linalg.norm(b - a)
        n = max(1, int(np.ceil(length / spacing)))
        t = np.linspace(0.0, 1.0, n + 1)
        pts.append(a[None] + t[:, None] * (b - a)[None])
    allpts = np.concatenate(pts, axis=0)
    _, idx = np.unique(np.round(allpts, 9), axis=0, return_index=True)
    return allpts[np.sort(idx)]


# ---------------------------------------------------------------- file I/O

SCENE_FORMAT_VERSION = 1


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_FORMAT_VERSION,
        "units": "mm",
        "seed": scene.seed,
        "pleura": {
            "kind": "ellipsoid",
            "center": list(scene.pleura_center),
            "semi_axes": list(scene.pleura_semi_axes),
        },
        "airways": {
            "nodes": scene.airway_nodes.tolist(),
            "radii": scene.airway_radii.tolist(),
            "edges": [list(e) for e in scene.airway_edges],
        },
        "vessels": [{"p0": list(p0), "p1": list(p1), "radius": r}
                    for p0, p1, r in scene.vessels],
        "target_regions": [{"lo": list(lo), "hi": list(hi)}
                           for lo, hi in scene.target_regions],
        "fiducials": [{
            "coil_position": f.coil_pose.p.tolist(),
            "coil_rotation": f.coil_pose.R.tolist(),
            "sphere_centers": f.sphere_centers.tolist(),
        } for f in scene.fiducials],
        "kappa_max": scene.kappa_max,
        "clearance_min": scene.clearance_min,
    }


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported scene version {doc.get('version')!r}")
    if doc.get("units") != "mm":
        raise ConfigurationError("scene units must be mm")
    air = doc["airways"]
    fids = tuple(
        FiducialModel(Pose(np.array(f["coil_position"]),
                           np.array(f["coil_rotation"])),
                      np.array(f["sphere_centers"]))
        for f in doc["fiducials"])
    return Scene(
        seed=int(doc["seed"]),
        pleura_center=np.array(doc["pleura"]["center"]),
        pleura_semi_axes=np.array(doc["pleura"]["semi_axes"]),
        airway_nodes=np.array(air["nodes"]),
        airway_radii=np.array(air["radii"]),
        airway_edges=tuple(tuple(e) for e in air["edges"]),
        vessels=tuple((tuple(v["p0"]), tuple(v["p1"]), float(v["radius"]))
                      for v in doc["vessels"]),
        target_regions=tuple((tuple(r["lo"]), tuple(r["hi"]))
                             for r in doc["target_regions"]),
        fiducials=fids,
        kappa_max=float(doc["kappa_max"]),
        clearance_min=float(doc["clearance_min"]),
    )


def scene_json(scene: Scene) -> str:
    """Canonical, order-stable serialization (diffs cleanly)."""
    return json.dumps(scene_to_dict(scene), sort_keys=True, indent=1)


def scene_hash(scene: Scene) -> str:
    return hashlib.sha256(scene_json(scene).encode()).hexdigest()[:16]


def save_scene(scene: Scene, path):
    with open(path, "w") as f:
        f.write(scene_json(scene))


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))
