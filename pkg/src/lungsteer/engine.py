"""Deployment orchestration, metrics, and the comparison study.

A deployment runs the full three-stage workflow against one target:
bronchoscope route traversal and piercing (with execution noise), a
teleoperation-style aiming loop until the alignment check passes, a
replan from the achieved pose, and segmented autonomous steering across
breath-hold windows.  The record it produces replays bit-identically
from its seeds.

The final targeting measurement is taken after the last hold releases,
under resumed tidal breathing — the confirmation reading is what the
tracker reports once the procedure ends, not a mid-hold sample — so the
sensed error reflects registration residual, sensor noise, and the
breathing offset of the tissue around the tip.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .anatomy import Scene, clearance_batch, sample_target, scene_hash
from .control import (
    ControlParams,
    SteeringContext,
    default_gate_stream,
    execute_segment,
    segment_length,
    segment_point_at,
)
from .errors import (
    AlignmentFailed,
    GateTimeout,
    NoPlanFound,
    PreconditionError,
    SafetyStop,
    SegmentIncomplete,
)
from .geometry import Pose, rot_x, rot_y, rotation_about_axis
from .needle import IN_VIVO_NOISE, NeedleState, NoiseConfig
from .planner import (
    PlanRequest,
    ThreeStagePlan,
    candidate_exits,
    check_alignment,
    plan_candidates,
    plan_from_dict,
    plan_to_dict,
    replan,
    segment_plan,
)
from .registration import (
    RigidTransform,
    fiducial_registration_from_scene,
)
from .respiration import BreathModel, marker_displacement

STATUS_COMPLETED = "completed"
STATUS_NO_PLAN = "no_plan"
STATUS_ALIGNMENT_FAILED = "alignment_failed"
STATUS_SAFETY_STOP = "safety_stop"
STATUS_GATE_TIMEOUT = "gate_timeout"
STATUS_INCOMPLETE = "incomplete"

MAX_SEGMENT_RETRIES = 12

ROW_HEADER = ("t", "sensed_x", "sensed_y", "sensed_z",
              "true_x", "true_y", "true_z", "window_open", "inserted_mm")


# --------------------------------------------------------------- profiles

@dataclass(frozen=True)
class DeploymentProfile:
    """Every stochastic knob of a deployment, bundled and named.

    `reg_transform_scale` sizes the true EM-to-scene offset; the robot
    only knows the fiducial-registration estimate of it, sensed with
    `reg_fiducial_noise`.  `confirm_delay` bounds the time between the
    final hold release and the confirmation tracker reading.
    """

    name: str
    needle_noise: NoiseConfig
    breath: BreathModel
    reg_transform_scale: float = 0.0   # mm, true EM->scene translation
    reg_rotation_scale: float = 0.0    # rad, true EM->scene rotation
    reg_fiducial_noise: float = 0.0    # mm std sensing fiducial spheres
    piercing_pos_noise: float = 0.0    # mm std on achieved piercing point
    piercing_ang_noise: float = 0.0    # rad std on achieved heading
    aim_exec_noise: float = 0.0        # rad std per aiming correction
    max_aim_attempts: int = 10
    confirm_delay: tuple = (2.0, 2.0)  # s, uniform range after release


NOISELESS_PROFILE = DeploymentProfile(
    name="noiseless",
    needle_noise=NoiseConfig.zero(),
    breath=BreathModel(amplitude=0.0, noise=0.0),
)

IN_VIVO_PROFILE = DeploymentProfile(
    name="in_vivo",
    needle_noise=IN_VIVO_NOISE,
    breath=BreathModel(noise=0.05),
    reg_transform_scale=30.0,
    reg_rotation_scale=0.3,
    reg_fiducial_noise=0.15,
    piercing_pos_noise=0.5,
    piercing_ang_noise=np.deg2rad(2.0),
    aim_exec_noise=np.deg2rad(0.3),
    confirm_delay=(1.0, 3.0),
)

PROFILES = {p.name: p for p in (NOISELESS_PROFILE, IN_VIVO_PROFILE)}


# ----------------------------------------------------------------- record

@dataclass
class DeploymentRecord:
    """Complete, replayable account of one deployment.

    `rows` are per-tick tuples matching ROW_HEADER; `inserted_mm` is the
    cumulative commanded arclength, which pairs each tracked sample with
    its planned counterpart.
    """

    scene_hash: str
    target: np.ndarray
    seed: int
    profile: str
    kind: str = "robot"
    plan_choice: int = 0
    status: str = STATUS_COMPLETED
    plan: ThreeStagePlan | None = None
    executed_plan: ThreeStagePlan | None = None
    rows: list = field(default_factory=list)
    breath_trace: list = field(default_factory=list)   # (t, marker_mm)
    segment_results: list = field(default_factory=list)  # (mm, completed)
    aim_attempts: int = 0
    adverse_events: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    final_state: NeedleState | None = None

    def tracked_tip(self) -> np.ndarray:
        return np.array([r[1:4] for r in self.rows], dtype=float)

    def true_tip(self) -> np.ndarray:
        return np.array([r[4:7] for r in self.rows], dtype=float)

    def length_mm(self) -> float:
        return float(self.rows[-1][8]) if self.rows else 0.0


def targeting_error(rec: DeploymentRecord) -> float:
    """Distance from the last sensed tip position to the target (the
    tracker-frame measurement the physical system reports)."""
    if not rec.rows:
        raise PreconditionError("record has no tip samples")
    return float(np.linalg.norm(np.asarray(rec.rows[-1][1:4]) - rec.target))


def true_targeting_error(rec: DeploymentRecord) -> float:
    """Simulator-only: distance from the true tip to the target."""
    if rec.final_state is None:
        raise PreconditionError("record has no final needle state")
    return float(np.linalg.norm(rec.final_state.tip.p - rec.target))


def trajectory_error_series(rec: DeploymentRecord) -> list:
    """(t, error_mm, in_window) tuples pairing each tracked sample with
    the plan point at the same inserted arclength.

    Out-of-window samples (tidal breathing) are included but flagged
    False so plots can render them separately.
    """
    if rec.executed_plan is None or not rec.rows:
        raise PreconditionError("record has no executed plan samples")
    path = list(rec.executed_plan.needle_path)
    out = []
    for r in rec.rows:
        planned = segment_point_at(path, float(r[8]))
        err = float(np.linalg.norm(np.asarray(r[1:4]) - planned))
        out.append((float(r[0]), err, bool(r[7])))
    return out


# ------------------------------------------------------------ deployment

def _perturbed_pose(pose: Pose, pos_noise: float, ang_noise: float,
                    rng) -> Pose:
    p = pose.p + (rng.normal(0.0, pos_noise, size=3) if pos_noise > 0
                  else 0.0)
    R = pose.R
    if ang_noise > 0:
        axis = rng.normal(size=3)
        R = rotation_about_axis(axis, rng.normal(0.0, ang_noise)) @ R
    return Pose(p, R)


def _registration_pair(scene: Scene, profile: DeploymentProfile,
                       rng) -> tuple:
    """(true EM->scene transform, robot's estimate of it)."""
    if profile.reg_transform_scale <= 0 and profile.reg_rotation_scale <= 0:
        return RigidTransform.identity(), RigidTransform.identity()
    axis = rng.normal(size=3)
    true_T = RigidTransform(
        rotation_about_axis(axis, rng.uniform(-profile.reg_rotation_scale,
                                              profile.reg_rotation_scale)),
        rng.uniform(-profile.reg_transform_scale,
                    profile.reg_transform_scale, size=3))
    est = fiducial_registration_from_scene(
        scene, true_T, profile.reg_fiducial_noise, rng).transform
    return true_T, est


def _advance_to_clearance(scene: Scene, tip: Pose,
                          max_advance: float = 5.0) -> Pose:
    """Advance along the heading until the tip regains piercing clearance
    (piercing execution noise can leave it too close to the airway wall,
    which no amount of yaw/pitch correction fixes)."""
    margin = scene.clearance_min + 0.1
    offsets = np.arange(0.0, max_advance + 1e-9, 0.25)
    pts = tip.p[None] + offsets[:, None] * tip.heading[None]
    clear = clearance_batch(scene, pts)
    good = np.nonzero(clear >= margin)[0]
    if len(good):
        return Pose(pts[good[0]], tip.R) if good[0] > 0 else tip
    # the whole ray is blocked (heading runs parallel to the wall): nudge
    # the tip up the clearance gradient instead, the equivalent of
    # repositioning the sheath by a fraction of a millimetre
    p = pts[int(np.argmax(clear))]
    eps, step = 0.05, 0.25
    probes = np.vstack([np.eye(3) * eps, -np.eye(3) * eps])
    for _ in range(20):
        if clearance_batch(scene, p[None])[0] >= margin:
            break
        c = clearance_batch(scene, p[None] + probes)
        grad = (c[:3] - c[3:]) / (2.0 * eps)
        norm = np.linalg.norm(grad)
        if norm < 1e-9:
            break
        p = p + step * grad / norm
    return Pose(p, tip.R)


def _aiming_loop(tip: Pose, target, scene: Scene,
                 profile: DeploymentProfile, rng) -> tuple:
    """Scripted corrector: apply the suggested (yaw, pitch) with actuation
    noise until the alignment check passes.  Returns (pose, attempts)."""
    for attempt in range(1, profile.max_aim_attempts + 1):
        chk = check_alignment(tip, target, scene)
        if chk.aligned:
            return tip, attempt
        yaw, pitch = chk.correction
        if profile.aim_exec_noise > 0:
            yaw += rng.normal(0.0, profile.aim_exec_noise)
            pitch += rng.normal(0.0, profile.aim_exec_noise)
        tip = Pose(tip.p, tip.R @ rot_y(yaw) @ rot_x(-pitch))
    raise AlignmentFailed(
        f"not aligned after {profile.max_aim_attempts} attempts")


def run_deployment(scene: Scene, target, profile: DeploymentProfile
                   = IN_VIVO_PROFILE, seed: int = 0,
                   plan_choice: int = 0) -> DeploymentRecord:
    """Execute the full three-stage workflow; failures are recorded in the
    returned record's status rather than raised."""
    target = np.asarray(target, dtype=float)
    rec = DeploymentRecord(scene_hash(scene), target, int(seed),
                           profile.name, plan_choice=plan_choice)
    reg_rng, pierce_rng, aim_rng, ctrl_rng, confirm_rng = [
        np.random.default_rng(s)
        for s in np.random.SeedSequence(seed).spawn(5)]

    try:
        plans = plan_candidates(PlanRequest(scene=scene, target=target,
                                            rng_seed=seed))
    except NoPlanFound:
        rec.status = STATUS_NO_PLAN
        return rec
    plan = plans[min(plan_choice, len(plans) - 1)]
    rec.plan = plan

    true_reg, reg_est = _registration_pair(scene, profile, reg_rng)

    # stage 1: route traversal ends at the piercing pose, with execution
    # noise on where the needle actually comes out
    achieved = _perturbed_pose(plan.piercing_pose,
                               profile.piercing_pos_noise,
                               profile.piercing_ang_noise, pierce_rng)
    achieved = _advance_to_clearance(scene, achieved)

    # stage 2: aiming until the alignment check passes
    try:
        tip, rec.aim_attempts = _aiming_loop(achieved, target, scene,
                                             profile, aim_rng)
    except AlignmentFailed:
        rec.status = STATUS_ALIGNMENT_FAILED
        return rec

    try:
        ex_plan = replan(tip, target, scene, plan, rng_seed=seed + 1)
    except (NoPlanFound, PreconditionError):
        rec.status = STATUS_NO_PLAN
        return rec
    rec.executed_plan = ex_plan

    # stage 3: segmented autonomous steering across holds
    ctx = SteeringContext.from_start(scene, profile.breath, tip,
                                     noise=profile.needle_noise,
                                     reg=true_reg, reg_est=reg_est,
                                     rng=ctrl_rng)
    base_stream = default_gate_stream(ctx)

    def stream(t, want_hold):
        g = base_stream(t, want_hold)
        rec.breath_trace.append(
            (t, marker_displacement(ctx.breath, t, g)))
        return g

    run_steering_stage(ctx, ex_plan, rec, stream)
    if rec.status == STATUS_COMPLETED:
        take_confirmation_sample(
            ctx, rec, stream, confirm_rng.uniform(*profile.confirm_delay))
    audit_record_truth(scene, rec)
    return rec


def run_steering_stage(ctx: SteeringContext, ex_plan: ThreeStagePlan,
                       rec: DeploymentRecord, stream) -> None:
    """Segmented autonomous execution with incomplete-segment retries;
    appends tick rows to the record and sets its status/final state."""
    inserted = rec.rows[-1][8] if rec.rows else 0.0

    def absorb(log_rows):
        nonlocal inserted
        for r in log_rows:
            inserted += r[2] * ctx.params.tick
            rec.rows.append((r[0], r[4], r[5], r[6], r[7], r[8], r[9],
                             bool(r[10]), inserted))

    queue = deque(segment_plan(list(ex_plan.needle_path)))
    retries = 0
    while queue:
        seg = queue.popleft()
        try:
            log = execute_segment(ctx, seg, gate_stream=stream)
            absorb(log.rows)
            rec.segment_results.append((segment_length(seg), True))
        except SegmentIncomplete as e:
            absorb(e.log.rows)
            rec.segment_results.append(
                (segment_length(seg) - e.remaining_mm, False))
            retries += 1
            if retries > MAX_SEGMENT_RETRIES:
                rec.status = STATUS_INCOMPLETE
                break
            done = segment_length(seg) - e.remaining_mm
            if done < 0.5:
                queue.appendleft(seg)
            else:
                parts = segment_plan(seg, seg_len=done)
                rest = [a for part in parts[1:] for a in part]
                if rest:
                    queue.appendleft(rest)
        except SafetyStop as e:
            absorb(e.log.rows)
            rec.adverse_events.append("clearance breach during steering")
            rec.status = STATUS_SAFETY_STOP
            break
        except GateTimeout:
            rec.status = STATUS_GATE_TIMEOUT
            break
    rec.final_state = ctx.needle


def take_confirmation_sample(ctx: SteeringContext, rec: DeploymentRecord,
                             stream, delay: float) -> None:
    """Confirmation reading after the final hold releases: advance the
    gate without requesting a hold, wait `delay` seconds into tidal
    breathing, then take the closing tracker sample."""
    inserted = rec.rows[-1][8] if rec.rows else 0.0
    release_t = None
    while True:
        ctx.t = round((ctx.t + ctx.params.tick) / ctx.params.tick) \
            * ctx.params.tick
        g = stream(ctx.t, False)
        if release_t is None:
            if not g.window_open:
                release_t = ctx.t
        elif ctx.t - release_t >= delay:
            break
    meas = ctx.sense_tip()
    rec.rows.append((ctx.t, *meas.position, *ctx.needle.tip.p,
                     False, inserted))


def audit_record_truth(scene: Scene, rec: DeploymentRecord) -> None:
    """Truth audit: adverse iff the true trajectory ever breached an
    obstacle; sub-margin excursions are flagged but not adverse."""
    if not rec.rows:
        return
    clear = clearance_batch(scene, rec.true_tip())
    if float(clear.min()) < 0.0 and not rec.adverse_events:
        rec.adverse_events.append("clearance breach in truth audit")
    elif 0.0 <= float(clear.min()) < scene.clearance_min:
        rec.flags.append("margin_violation")


def replay_deployment(scene: Scene, rec: DeploymentRecord
                      ) -> DeploymentRecord:
    """Re-run a record from its stored seeds and configuration."""
    return run_deployment(scene, rec.target, PROFILES[rec.profile],
                          seed=rec.seed, plan_choice=rec.plan_choice)


def records_equal(a: DeploymentRecord, b: DeploymentRecord) -> bool:
    """Bit-identical comparison of the replay-relevant content."""
    if (a.scene_hash, a.seed, a.profile, a.status, a.kind,
            a.aim_attempts) != (b.scene_hash, b.seed, b.profile, b.status,
                                b.kind, b.aim_attempts):
        return False
    if not np.array_equal(a.target, b.target):
        return False
    if len(a.rows) != len(b.rows):
        return False
    return all(ra == rb for ra, rb in zip(a.rows, b.rows))


# ------------------------------------------------------- manual baseline

def run_manual_baseline(scene: Scene, target, aim_noise: float
                        = np.deg2rad(3.0), drift: float = 0.05,
                        max_insert: float = 45.0, seed: int = 0,
                        sensor_noise: float = 0.35,
                        insert_v: float = 2.0) -> DeploymentRecord:
    """Straight rigid-needle insertion from a bronchoscopic piercing site.

    The aim direction gets a fixed angular error, the shaft drifts
    laterally as it goes, and there is no feedback correction; insertion
    stops at the target depth along the aim, at `max_insert`, or on
    obstacle contact.
    """
    target = np.asarray(target, dtype=float)
    rec = DeploymentRecord(scene_hash(scene), target, int(seed), "manual",
                           kind="manual")
    rng = np.random.default_rng(np.random.SeedSequence([17, seed]))
    exits = candidate_exits(scene, target)
    if not exits:
        rec.status = STATUS_NO_PLAN
        return rec
    # physician-style site choice: of the reachable exits, take the one
    # whose straight line at the target stays obstacle-free the deepest
    def free_depth(pose):
        d = target - pose.p
        dist = float(np.linalg.norm(d))
        d /= max(dist, 1e-9)
        ss = np.arange(0.5, min(dist, max_insert) + 1e-9, 0.5)
        pts = pose.p[None] + ss[:, None] * d[None]
        clear = clearance_batch(scene, pts)
        blocked = np.nonzero((clear < 0.0) & (ss > 3.0))[0]
        return float(ss[blocked[0] - 1]) if len(blocked) else float(ss[-1])

    pose = max((e[2] for e in exits), key=free_depth)
    aim = target - pose.p
    depth_to_target = float(np.linalg.norm(aim))
    aim = aim / max(depth_to_target, 1e-9)
    if aim_noise > 0:
        axis = np.cross(aim, rng.normal(size=3))
        axis /= max(np.linalg.norm(axis), 1e-12)
        aim = rotation_about_axis(axis, abs(rng.normal(0.0, aim_noise))) \
            @ aim
    drift_dir = np.cross(aim, rng.normal(size=3))
    drift_dir /= max(np.linalg.norm(drift_dir), 1e-12)

    ds = 0.5
    stop = min(depth_to_target, max_insert)
    s_values = np.arange(ds, stop + 1e-9, ds)
    tip = pose.p.copy()
    for s in s_values:
        cand = pose.p + aim * s + drift_dir * (drift * s)
        # skip contact checks while still leaving the pierced airway wall
        if s > 3.0 and float(clearance_batch(scene, cand[None])[0]) < 0.0:
            rec.adverse_events.append("obstacle contact during insertion")
            break
        tip = cand
        sensed = tip + (rng.normal(0.0, sensor_noise, size=3)
                        if sensor_noise > 0 else 0.0)
        rec.rows.append((s / insert_v, *sensed, *tip, True, float(s)))
    rec.final_state = NeedleState(
        Pose(tip, pose.R), rec.rows[-1][8] if rec.rows else 0.0, 0.0)
    return rec


# -------------------------------------------------------------- statistics

@dataclass(frozen=True)
class CohortSummary:
    n: int
    mean: float
    sd: float

    def __post_init__(self):
        if self.n < 2:
            raise PreconditionError("cohort needs n >= 2")
        if self.sd < 0:
            raise PreconditionError("sd must be >= 0")

    @staticmethod
    def from_values(values) -> "CohortSummary":
        v = np.asarray(values, dtype=float)
        if len(v) < 2:
            raise PreconditionError("cohort needs n >= 2")
        return CohortSummary(len(v), float(v.mean()), float(v.std(ddof=1)))


def _degenerate_t(mean_a: float, mean_b: float) -> tuple:
    # zero pooled variance: identical means are indistinguishable (p=1);
    # different means are, in the limit, infinitely separated (p=0)
    if np.isclose(mean_a, mean_b):
        return 0.0, 1.0
    return float(np.inf) if mean_a > mean_b else float(-np.inf), 0.0


def compare_cohorts(a, b) -> tuple:
    """Two-sided unpaired Student t-test (pooled variance): (t, p)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise PreconditionError("each cohort needs n >= 2")
    if a.std(ddof=1) == 0.0 and b.std(ddof=1) == 0.0:
        return _degenerate_t(float(a.mean()), float(b.mean()))
    with warnings.catch_warnings():
        # near-identical cohorts trip scipy's precision-loss warning; the
        # exactly-degenerate case is already handled above
        warnings.simplefilter("ignore", RuntimeWarning)
        t, p = stats.ttest_ind(a, b, equal_var=True)
    return float(t), float(p)


def compare_cohort_summaries(a: CohortSummary, b: CohortSummary) -> tuple:
    """Same test computed from (n, mean, sd) summaries only."""
    if a.sd == 0.0 and b.sd == 0.0:
        return _degenerate_t(a.mean, b.mean)
    t, p = stats.ttest_ind_from_stats(a.mean, a.sd, a.n,
                                      b.mean, b.sd, b.n, equal_var=True)
    return float(t), float(p)


# ------------------------------------------------------------------ study

@dataclass
class StudyReport:
    """Cohort comparison of robot deployments vs the manual baseline."""

    rows: list            # (id, kind, length_mm, error_mm, adverse, seed)
    robot_length: CohortSummary
    manual_length: CohortSummary
    robot_error: CohortSummary
    manual_error: CohortSummary
    length_test: tuple    # (t, p)
    error_test: tuple

    def to_csv_str(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(("id", "kind", "length_mm", "error_mm", "adverse",
                    "seed"))
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [list(r) for r in self.rows],
            "cohorts": {
                name: vars(getattr(self, name))
                for name in ("robot_length", "manual_length",
                             "robot_error", "manual_error")
            },
            "length_test": list(self.length_test),
            "error_test": list(self.error_test),
        }


def build_study_report(records) -> StudyReport:
    """Deterministic fold over completed records, sorted by index."""
    rows = []
    robot_len, manual_len, robot_err, manual_err = [], [], [], []
    for i, rec in enumerate(sorted(records, key=lambda r: (r.kind, r.seed))):
        err = targeting_error(rec)
        length = rec.length_mm()
        rows.append((i, rec.kind, length, err, len(rec.adverse_events) > 0,
                     rec.seed))
        if rec.kind == "robot":
            robot_len.append(length)
            robot_err.append(err)
        else:
            manual_len.append(length)
            manual_err.append(err)
    return StudyReport(
        rows=rows,
        robot_length=CohortSummary.from_values(robot_len),
        manual_length=CohortSummary.from_values(manual_len),
        robot_error=CohortSummary.from_values(robot_err),
        manual_error=CohortSummary.from_values(manual_err),
        length_test=compare_cohorts(robot_len, manual_len),
        error_test=compare_cohorts(robot_err, manual_err),
    )


def study_targets(scene: Scene, n: int, seed: int,
                  min_target_depth: float = 35.0) -> list:
    """Seeded deep peripheral targets for the comparison study, at least
    `min_target_depth` mm from the nearest airway."""
    targets = []
    t_seed = seed * 10_000
    while len(targets) < n:
        cand = sample_target(scene, t_seed)
        t_seed += 1
        depth = float(np.linalg.norm(scene.airway_nodes - cand,
                                     axis=1).min())
        if depth >= min_target_depth:
            targets.append(cand)
    return targets


def run_comparison_study(scene: Scene, n_robot: int = 10,
                         n_manual: int = 11, seed: int = 0,
                         profile: DeploymentProfile = IN_VIVO_PROFILE,
                         max_insert: float = 30.0,
                         min_target_depth: float = 35.0) -> tuple:
    """Run both cohorts on seeded targets; returns (report, records).

    `max_insert` caps the manual straight needle at the clinical depth
    norm; the robot has no such cap.  Targets are restricted to deep
    peripheral sites — at least `min_target_depth` mm from the nearest
    airway — the population conventional straight tools cannot reach.
    """
    records = []
    n_needed = max(n_robot, n_manual)
    targets = study_targets(scene, n_needed, seed, min_target_depth)
    for i in range(n_robot):
        rec = run_deployment(scene, targets[i], profile,
                             seed=seed * 1000 + i)
        records.append(rec)
    for i in range(n_manual):
        rec = run_manual_baseline(scene, targets[i % n_needed],
                                  max_insert=max_insert,
                                  seed=seed * 1000 + i)
        records.append(rec)
    usable = [r for r in records if r.rows]
    return build_study_report(usable), records


# -------------------------------------------------------------- artifacts

def record_to_dict(rec: DeploymentRecord) -> dict:
    return {
        "scene_hash": rec.scene_hash,
        "target": rec.target.tolist(),
        "seed": rec.seed,
        "profile": rec.profile,
        "kind": rec.kind,
        "plan_choice": rec.plan_choice,
        "status": rec.status,
        "plan": plan_to_dict(rec.plan) if rec.plan else None,
        "executed_plan": (plan_to_dict(rec.executed_plan)
                          if rec.executed_plan else None),
        "rows": [list(r) for r in rec.rows],
        "breath_trace": [list(b) for b in rec.breath_trace],
        "segment_results": [list(s) for s in rec.segment_results],
        "aim_attempts": rec.aim_attempts,
        "adverse_events": list(rec.adverse_events),
        "flags": list(rec.flags),
        "final_state": ({
            "p": rec.final_state.tip.p.tolist(),
            "R": rec.final_state.tip.R.tolist(),
            "inserted": rec.final_state.inserted,
            "roll": rec.final_state.roll,
        } if rec.final_state else None),
    }


def record_from_dict(doc: dict) -> DeploymentRecord:
    fs = doc.get("final_state")
    return DeploymentRecord(
        scene_hash=doc["scene_hash"],
        target=np.asarray(doc["target"], dtype=float),
        seed=int(doc["seed"]),
        profile=doc["profile"],
        kind=doc.get("kind", "robot"),
        plan_choice=int(doc.get("plan_choice", 0)),
        status=doc["status"],
        plan=plan_from_dict(doc["plan"]) if doc.get("plan") else None,
        executed_plan=(plan_from_dict(doc["executed_plan"])
                       if doc.get("executed_plan") else None),
        rows=[tuple(r[:7]) + (bool(r[7]), float(r[8]))
              for r in doc.get("rows", [])],
        breath_trace=[tuple(b) for b in doc.get("breath_trace", [])],
        segment_results=[tuple(s) for s in doc.get("segment_results", [])],
        aim_attempts=int(doc.get("aim_attempts", 0)),
        adverse_events=list(doc.get("adverse_events", [])),
        flags=list(doc.get("flags", [])),
        final_state=(NeedleState(Pose(np.asarray(fs["p"]),
                                      np.asarray(fs["R"])),
                                 fs["inserted"], fs["roll"])
                     if fs else None),
    )


def save_record(rec: DeploymentRecord, path) -> None:
    with open(path, "w") as f:
        json.dump(record_to_dict(rec), f)


def load_record(path) -> DeploymentRecord:
    with open(path) as f:
        return record_from_dict(json.load(f))


def record_rows_to_csv(rec: DeploymentRecord, path_or_file) -> None:
    """Plot-ready export of the tick rows (tracked vs true trajectory)."""
    def write(f):
        w = csv.writer(f)
        w.writerow(ROW_HEADER)
        for r in rec.rows:
            w.writerow([r[0], r[1], r[2], r[3], r[4], r[5], r[6],
                        int(r[7]), r[8]])
    if hasattr(path_or_file, "write"):
        write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as f:
            write(f)
