"""Three-stage motion planning: airway route + piercing pose selection,
aiming orientation, and curvature-bounded needle path search with
clearance costing, alignment checking and replanning.

The needle-path search is a sampling-based tree of constant-curvature arc
extensions with an exact steer-to-point goal connection, collision-checked
against all obstacle classes with the scene's clearance margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .anatomy import Scene, clearance_batch, distance_to_obstacles_batch
from .errors import NoPlanFound, PreconditionError
from .geometry import (
    Arc,
    Pose,
    angular_deviation,
    heading_pose,
    propagate_arc,
    steer_to_point,
)

# Planner defaults; the physical system publishes none of these.
EXTEND_MIN = 2.0          # mm, arc-extension arclength bounds
EXTEND_MAX = 10.0
DEFAULT_BUDGET = 50_000   # extension samples per needle-path search
GOAL_BIAS = 0.25
MAX_GOAL_CONNECT = 90.0   # mm, longest single goal-connection arc
COLLISION_DS = 0.5        # mm, search-time collision sampling
VALIDATE_DS = 0.1         # mm, independent-validator sampling
COST_WEIGHT = 5.0
COST_SAFE_DIST = 3.0      # mm, proximity penalty onset
THETA_ALIGN = np.deg2rad(5.0)
SCOPE_DIAMETER = 3.0      # mm, bronchoscope fit penalty threshold
CANDIDATE_MIN_SEPARATION = 5.0  # mm between candidate piercing sites
DEFAULT_K = 4
DEFAULT_GOAL_TOL = 1.0


@dataclass(frozen=True)
class PlanRequest:
    scene: Scene
    target: np.ndarray
    k: int = DEFAULT_K
    goal_tol: float = DEFAULT_GOAL_TOL
    rng_seed: int = 0
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "target",
                           np.asarray(self.target, dtype=float))
        if not (1 <= self.k <= 10):
            raise PreconditionError("k out of range")
        if self.goal_tol <= 0:
            raise PreconditionError("goal_tol must be > 0")


@dataclass(frozen=True)
class ThreeStagePlan:
    bronchoscope_route: tuple       # airway node indices, root -> exit
    piercing_pose: Pose
    aiming_orientation: np.ndarray  # unit vector into the parenchyma
    needle_path: tuple              # chained Arcs
    cost: float
    clearance_profile: tuple        # mm, sampled along the path
    target: np.ndarray

    @property
    def path_length(self) -> float:
        return float(sum(a.arclength for a in self.needle_path))

    def end_pose(self) -> Pose:
        return self.needle_path[-1].end


def path_points(path, ds: float) -> np.ndarray:
    """Sample positions along a chained arc path at spacing <= ds."""
    pts = [path[0].start.p[None]]
    for arc in path:
        pts.append(arc.points(ds, include_start=False))
    return np.concatenate(pts, axis=0)


def path_length(path) -> float:
    return float(sum(a.arclength for a in path))


def _collision_free(scene: Scene, arc: Arc, margin: float,
                    ds: float = COLLISION_DS) -> tuple:
    pts = arc.points(ds)
    worst = float(clearance_batch(scene, pts).min())
    return worst >= margin, worst


def plan_needle_path(start: Pose, target, scene: Scene,
                     goal_tol: float = DEFAULT_GOAL_TOL, rng_seed: int = 0,
                     budget: int = DEFAULT_BUDGET) -> list:
    """Sampling-based search for a curvature-bounded, obstacle-free arc
    chain from `start` to within goal_tol of `target`.

    Deterministic per seed.  Raises NoPlanFound when the budget runs out.
    """
    target = np.asarray(target, dtype=float)
    delta = scene.clearance_min
    kappa_cap = scene.kappa_max * (1 + 1e-9)
    d0 = clearance_batch(scene, start.p[None])
    if d0[0] < delta - 1e-9:
        raise PreconditionError("start clearance below scene minimum")

    rng = np.random.default_rng(rng_seed)
    poses = [start]
    parents = [-1]
    arcs = [None]
    positions = np.array([start.p])
    best_goal_dist = float(np.linalg.norm(start.p - target))
    best_clearance = float(d0[0])
    samples = 0

    def try_goal_connect(idx: int):
        nonlocal best_clearance
        pose = poses[idx]
        try:
            roll, kappa, s = steer_to_point(pose, target)
        except ValueError:
            return None
        if kappa > kappa_cap or s > MAX_GOAL_CONNECT or s <= 1e-9:
            return None
        arc = Arc(pose, kappa, s, roll)
        ok, worst = _collision_free(scene, arc, delta)
        best_clearance = max(best_clearance, worst) if not ok \
            else best_clearance
        if not ok:
            return None
        chain = [arc]
        j = idx
        while parents[j] >= 0:
            chain.append(arcs[j])
            j = parents[j]
        chain.reverse()
        return chain

    # the easy case: one exact arc straight to the target
    chain = try_goal_connect(0)
    if chain is not None:
        return chain

    lo = scene.pleura_center - scene.pleura_semi_axes
    hi = scene.pleura_center + scene.pleura_semi_axes

    while samples < budget:
        samples += 1
        q = target if rng.uniform() < GOAL_BIAS else rng.uniform(lo, hi)
        near = int(np.argmin(np.linalg.norm(positions - q, axis=1)))
        pose = poses[near]
        try:
            roll, kappa, s = steer_to_point(pose, q)
        except ValueError:
            continue
        kappa = min(kappa, scene.kappa_max)
        s = float(np.clip(s, EXTEND_MIN, EXTEND_MAX))
        arc = Arc(pose, kappa, s, roll)
        ok, worst = _collision_free(scene, arc, delta)
        if not ok:
            best_clearance = max(best_clearance, worst)
            continue
        poses.append(arc.end)
        parents.append(near)
        arcs.append(arc)
        positions = np.vstack([positions, arc.end.p])
        best_goal_dist = min(best_goal_dist,
                             float(np.linalg.norm(arc.end.p - target)))
        chain = try_goal_connect(len(poses) - 1)
        if chain is not None:
            return chain

    raise NoPlanFound(
        f"no needle path within {budget} samples "
        f"(best goal distance {best_goal_dist:.1f} mm)",
        best_clearance=best_clearance, samples_used=samples)


def plan_cost(path, scene: Scene, weight: float = COST_WEIGHT,
              safe_dist: float = COST_SAFE_DIST,
              ds: float = COLLISION_DS) -> float:
    """Arclength plus a proximity penalty for clearance below safe_dist."""
    total = path_length(path)
    pts = path_points(path, ds)
    d = clearance_batch(scene, pts)
    seg = total / max(len(pts) - 1, 1)
    penalty = np.maximum(0.0, safe_dist - d)[1:].sum() * seg
    return float(total + weight * penalty)


def clearance_profile(path, scene: Scene, ds: float = COLLISION_DS) -> tuple:
    pts = path_points(path, ds)
    d = clearance_batch(scene, pts)
    return tuple(float(x) for x in d)


def _route_to_node(scene: Scene, node: int) -> tuple:
    parent = {}
    for i, j in scene.airway_edges:
        parent[j] = i
    route = [node]
    while route[-1] in parent:
        route.append(parent[route[-1]])
    return tuple(reversed(route))


def _route_cost(scene: Scene, route, scope_d: float = SCOPE_DIAMETER,
                fit_weight: float = 20.0) -> float:
    """Length plus a fit penalty per branch narrower than the scope; the
    penalty is what biases piercing sites proximal."""
    cost = 0.0
    for i, j in zip(route, route[1:]):
        length = float(np.linalg.norm(scene.airway_nodes[j]
                                      - scene.airway_nodes[i]))
        r = min(scene.airway_radii[i], scene.airway_radii[j])
        cost += length + fit_weight * max(0.0, scope_d / 2 - r)
    return cost


def piercing_pose_for_exit(scene: Scene, node: int, target) -> Pose | None:
    """Pose just outside the airway wall at an exit node, headed at the
    target.

    Walks outward from the node until the point clears all obstacles;
    tries directions tilted away from the target line when the direct one
    stays blocked (e.g. runs along the airway or into a paired vessel).
    """
    target = np.asarray(target, dtype=float)
    p = scene.airway_nodes[node]
    d0 = target - p
    d0 = d0 / max(np.linalg.norm(d0), 1e-9)
    parent = next((i for i, j in scene.airway_edges if j == node), None)
    axis_dir = p - scene.airway_nodes[parent] if parent is not None \
        else np.array([0.0, 0, 1])
    axis_dir = axis_dir / max(np.linalg.norm(axis_dir), 1e-9)
    tilt_axis = np.cross(axis_dir, d0)
    n = np.linalg.norm(tilt_axis)
    tilt_axis = tilt_axis / n if n > 1e-6 else np.array([1.0, 0, 0])
    from .geometry import rotation_about_axis

    margin = scene.clearance_min + 0.1
    for tilt in (0.0, 0.35, -0.35, 0.7, -0.7):
        d = rotation_about_axis(tilt_axis, tilt) @ d0
        r0 = float(scene.airway_radii[node])
        offsets = np.arange(r0 + margin, r0 + margin + 10.0, 0.25)
        pts = p[None] + offsets[:, None] * d[None]
        clear = clearance_batch(scene, pts)
        good = np.nonzero(clear >= margin)[0]
        if len(good):
            pos = pts[good[0]]
            return heading_pose(pos, target - pos)
    return None


def candidate_exits(scene: Scene, target, max_candidates: int = 12) -> list:
    """Exit nodes ranked by route cost + needle-distance, piercing sites
    pairwise separated, piercing point clearance-feasible."""
    target = np.asarray(target, dtype=float)
    scored = []
    for node in range(1, len(scene.airway_nodes)):
        route = _route_to_node(scene, node)
        pose = piercing_pose_for_exit(scene, node, target)
        if pose is None:
            continue
        needle_dist = float(np.linalg.norm(target - pose.p))
        score = _route_cost(scene, route) + needle_dist
        scored.append((score, node, route, pose))
    scored.sort(key=lambda s: (s[0], s[1]))
    picked = []
    for score, node, route, pose in scored:
        if any(np.linalg.norm(pose.p - q.p) < CANDIDATE_MIN_SEPARATION
               for _, _, q in picked):
            continue
        picked.append((node, route, pose))
        if len(picked) >= max_candidates:
            break
    return picked


def build_plan(scene: Scene, target, route, piercing: Pose, needle_path
               ) -> ThreeStagePlan:
    return ThreeStagePlan(
        bronchoscope_route=tuple(route),
        piercing_pose=piercing,
        aiming_orientation=piercing.heading,
        needle_path=tuple(needle_path),
        cost=plan_cost(needle_path, scene),
        clearance_profile=clearance_profile(needle_path, scene),
        target=np.asarray(target, dtype=float),
    )


def plan_candidates(req: PlanRequest) -> list:
    """Generate up to k candidate three-stage plans, sorted by cost.

    Piercing sites are pairwise separated; candidates are deterministic
    per request seed.  Raises NoPlanFound when no exit yields a path.
    """
    scene = req.scene
    exits = candidate_exits(scene, req.target, max_candidates=req.k + 8)
    if not exits:
        raise NoPlanFound("no clearance-feasible piercing site",
                          samples_used=0)
    seeds = np.random.SeedSequence(req.rng_seed).generate_state(len(exits))
    plans = []
    best_clearance = -np.inf
    samples_used = 0
    per_exit_budget = max(req.budget // max(len(exits), 1), 2000)
    for order, ((node, route, pose), seed) in enumerate(zip(exits, seeds)):
        try:
            path = plan_needle_path(pose, req.target, scene,
                                    goal_tol=req.goal_tol,
                                    rng_seed=int(seed),
                                    budget=per_exit_budget)
        except NoPlanFound as e:
            best_clearance = max(best_clearance, e.best_clearance)
            samples_used += e.samples_used
            continue
        except PreconditionError:
            continue
        plans.append((order, build_plan(scene, req.target, route, pose,
                                        path)))
        if len(plans) >= req.k:
            break
    if not plans:
        raise NoPlanFound("no feasible plan for any candidate piercing site",
                          best_clearance=best_clearance,
                          samples_used=samples_used)
    plans.sort(key=lambda op: (op[1].cost, op[1].path_length, op[0]))
    return [p for _, p in plans]


@dataclass(frozen=True)
class AlignmentCheck:
    aligned: bool
    correction: tuple  # (yaw, pitch) rad
    heading_error: float


def check_alignment(current_tip: Pose, target, scene: Scene,
                    theta_align: float = THETA_ALIGN,
                    probe_budget: int = 4000,
                    goal_tol: float = DEFAULT_GOAL_TOL) -> AlignmentCheck:
    """Aligned iff the tip heading is within theta_align of the target
    direction AND a reduced-budget path probe succeeds from here."""
    target = np.asarray(target, dtype=float)
    local = current_tip.R.T @ (target - current_tip.p)
    yaw = float(np.arctan2(local[0], local[2]))
    pitch = float(np.arctan2(local[1], np.hypot(local[0], local[2])))
    norm = np.linalg.norm(local)
    err = angular_deviation(current_tip.heading,
                            (target - current_tip.p) / norm) \
        if norm > 1e-9 else 0.0
    if err > theta_align:
        return AlignmentCheck(False, (yaw, pitch), err)
    try:
        plan_needle_path(current_tip, target, scene, goal_tol=goal_tol,
                         rng_seed=0, budget=probe_budget)
    except (NoPlanFound, PreconditionError):
        return AlignmentCheck(False, (yaw, pitch), err)
    return AlignmentCheck(True, (yaw, pitch), err)


def segment_plan(path, seg_len: float = 10.0) -> list:
    """Partition an arc chain into sequential segments of exactly seg_len
    arclength (the last may be shorter); concatenation reproduces the path."""
    if seg_len <= 0:
        raise PreconditionError("seg_len must be > 0")
    segments = []
    current = []
    room = seg_len
    for arc in path:
        remaining = arc
        while remaining is not None:
            if remaining.arclength <= room + 1e-9:
                current.append(remaining)
                room -= remaining.arclength
                remaining = None
            else:
                head = Arc(remaining.start, remaining.curvature, room,
                           remaining.roll)
                current.append(head)
                tail_start = head.end
                remaining = Arc(tail_start, remaining.curvature,
                                remaining.arclength - room, remaining.roll)
                room = 0.0
            if room <= 1e-9:
                segments.append(current)
                current = []
                room = seg_len
    if current:
        segments.append(current)
    return segments


def replan(current_tip: Pose, target, scene: Scene,
           prior: ThreeStagePlan, rng_seed: int = 1,
           goal_tol: float = DEFAULT_GOAL_TOL,
           budget: int = DEFAULT_BUDGET) -> ThreeStagePlan:
    """Recompute the needle path from the achieved tip pose, reusing the
    prior plan's route and piercing stage."""
    path = plan_needle_path(current_tip, target, scene, goal_tol=goal_tol,
                            rng_seed=rng_seed, budget=budget)
    return replace(prior,
                   aiming_orientation=current_tip.heading,
                   needle_path=tuple(path),
                   cost=plan_cost(path, scene),
                   clearance_profile=clearance_profile(path, scene),
                   target=np.asarray(target, dtype=float))


# ------------------------------------------------------------- validator

def validate_plan(plan: ThreeStagePlan, scene: Scene,
                  goal_tol: float = DEFAULT_GOAL_TOL,
                  continuity_tol: float = 1e-9,
                  ds: float = VALIDATE_DS) -> dict:
    """Independent plan validator (separate code path from the planner's
    own collision checks): continuity, curvature cap, clearance margin at
    fine sampling, and goal tolerance."""
    path = plan.needle_path
    checks = {}

    cont = 0.0
    for a, b in zip(path, path[1:]):
        end = propagate_arc(a.start, a.curvature, a.roll, a.arclength)
        cont = max(cont, float(np.abs(end.p - b.start.p).max()),
                   float(np.abs(end.R - b.start.R).max()))
    checks["continuity"] = cont <= continuity_tol

    checks["curvature"] = all(a.curvature <= scene.kappa_max * (1 + 1e-9)
                              for a in path)

    worst = np.inf
    for arc in path:
        n = max(1, int(np.ceil(arc.arclength / ds)))
        ss = np.linspace(0.0, arc.arclength, n + 1)
        pts = np.array([propagate_arc(arc.start, arc.curvature, arc.roll,
                                      s).p for s in ss])
        d, _ = distance_to_obstacles_batch(scene, pts)
        worst = min(worst, float(d.min()))
    checks["clearance"] = worst >= scene.clearance_min - 1e-6
    checks["min_clearance_mm"] = worst

    goal_err = float(np.linalg.norm(plan.end_pose().p - plan.target))
    checks["goal"] = goal_err <= goal_tol
    checks["goal_error_mm"] = goal_err

    checks["ok"] = all(checks[k] for k in ("continuity", "curvature",
                                           "clearance", "goal"))
    return checks


# ------------------------------------------------------------- plan file

PLAN_FORMAT_VERSION = 1


def _pose_to_dict(pose: Pose) -> dict:
    return {"p": pose.p.tolist(), "R": pose.R.tolist()}


def _pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["p"]), np.array(d["R"]))


def plan_to_dict(plan: ThreeStagePlan, scene_hash: str = "",
                 rng_seed: int = 0) -> dict:
    return {
        "version": PLAN_FORMAT_VERSION,
        "units": "mm",
        "request": {
            "scene_hash": scene_hash,
            "target": plan.target.tolist(),
            "seed": rng_seed,
        },
        "bronchoscope_route": list(plan.bronchoscope_route),
        "piercing_pose": _pose_to_dict(plan.piercing_pose),
        "aiming_orientation": plan.aiming_orientation.tolist(),
        "needle_path": [{
            "start": _pose_to_dict(a.start),
            "curvature": a.curvature,
            "arclength": a.arclength,
            "roll": a.roll,
        } for a in plan.needle_path],
        "cost": plan.cost,
        "clearance_profile": list(plan.clearance_profile),
    }


def plan_from_dict(doc: dict) -> ThreeStagePlan:
    if doc.get("version") != PLAN_FORMAT_VERSION:
        raise PreconditionError(
            f"unsupported plan version {doc.get('version')!r}")
    arcs = tuple(Arc(_pose_from_dict(a["start"]), float(a["curvature"]),
                     float(a["arclength"]), float(a["roll"]))
                 for a in doc["needle_path"])
    return ThreeStagePlan(
        bronchoscope_route=tuple(doc["bronchoscope_route"]),
        piercing_pose=_pose_from_dict(doc["piercing_pose"]),
        aiming_orientation=np.array(doc["aiming_orientation"]),
        needle_path=arcs,
        cost=float(doc["cost"]),
        clearance_profile=tuple(doc["clearance_profile"]),
        target=np.array(doc["request"]["target"]),
    )
