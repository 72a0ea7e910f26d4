"""Session protocol service: a live simulated procedure driven over
newline-delimited JSON messages.

`handle_message` is a pure state machine — (session, message) in,
(session, output lines) out — so the whole protocol is testable without
sockets; `serve_forever` wraps it in a local TCP server where sessions
are resumable by id after a disconnect.  Message and event schemas are
documented in docs/protocol.md and versioned by the `v` field.
"""

from __future__ import annotations

import json
import secrets
import socketserver
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .anatomy import Scene, generate_scene, scene_from_dict, scene_hash
from .control import SteeringContext, default_gate_stream
from .engine import (
    DeploymentRecord,
    PROFILES,
    STATUS_COMPLETED,
    STATUS_SAFETY_STOP,
    _advance_to_clearance,
    _perturbed_pose,
    _registration_pair,
    audit_record_truth,
    record_to_dict,
    run_steering_stage,
    take_confirmation_sample,
    targeting_error,
    trajectory_error_series,
)
from .errors import NoPlanFound, PreconditionError
from .geometry import Pose, rot_x, rot_y
from .planner import PlanRequest, check_alignment, plan_candidates, replan

PROTOCOL_VERSION = 1

STAGE_IDLE = "idle"
STAGE_PLANNED = "planned"
STAGE_NAVIGATING = "navigating"
STAGE_AIMING = "aiming"
STAGE_ALIGNED = "aligned"
STAGE_STEERING = "steering"
STAGE_DONE = "done"
STAGE_ABORTED = "aborted"

TERMINAL_STAGES = (STAGE_DONE, STAGE_ABORTED)

MAX_AIM_STEP = 0.5      # rad per command
MAX_AIM_ADVANCE = 5.0   # mm per command
DEFAULT_TICK_STRIDE = 5


@dataclass
class SessionState:
    """One procedure session; every field is reconstructible from the
    message transcript, so sessions survive reconnects."""

    sid: str
    stage: str = STAGE_IDLE
    scene: Scene | None = None
    profile_name: str = "noiseless"
    seed: int = 0
    tick_stride: int = DEFAULT_TICK_STRIDE
    target: np.ndarray | None = None
    plans: list = field(default_factory=list)
    selected: int | None = None
    tip: Pose | None = None
    executed_plan: object = None
    record: DeploymentRecord | None = None
    last_gate: dict | None = None
    last_meas: dict | None = None
    aim_attempts: int = 0


def _ok(msg_id, **extra) -> dict:
    return {"v": PROTOCOL_VERSION, "re": msg_id, "ok": True, **extra}


def _fail(msg_id, error: str, **extra) -> dict:
    return {"v": PROTOCOL_VERSION, "re": msg_id, "ok": False,
            "error": error, **extra}


def _event(name: str, **payload) -> dict:
    return {"v": PROTOCOL_VERSION, "event": name, **payload}


def _stage_event(session: SessionState) -> dict:
    return _event("stage", stage=session.stage)


def _plan_summary(i: int, plan) -> dict:
    return {
        "index": i,
        "cost": plan.cost,
        "length_mm": plan.path_length,
        "route": list(plan.bronchoscope_route),
        "min_clearance_mm": (min(plan.clearance_profile)
                             if plan.clearance_profile else None),
        "piercing_point": plan.piercing_pose.p.tolist(),
        "target": plan.target.tolist(),
    }


def _path_polyline(plan, ds: float = 1.0) -> list:
    from .planner import path_points
    return path_points(list(plan.needle_path), ds).tolist()


def _round3(arr) -> list:
    return np.round(np.asarray(arr, dtype=float), 3).tolist()


def _scene_geometry(scene) -> dict:
    """Decimated display geometry so the console never parses scene
    files: pleura ellipsoid, airway centerline segments with radii,
    vessel capsules, target boxes, fiducial positions."""
    nodes = np.asarray(scene.airway_nodes, dtype=float)
    return {
        "pleura": {"center": _round3(scene.pleura_center),
                   "semi_axes": _round3(scene.pleura_semi_axes)},
        "airways": [{"a": _round3(nodes[i]), "b": _round3(nodes[j]),
                     "r": round(float(scene.airway_radii[j]), 3)}
                    for i, j in scene.airway_edges],
        "vessels": [{"a": _round3(p0), "b": _round3(p1),
                     "r": round(float(r), 3)}
                    for p0, p1, r in scene.vessels],
        "target_regions": [{"lo": _round3(lo), "hi": _round3(hi)}
                           for lo, hi in scene.target_regions],
        "fiducials": [_round3(f.coil_pose.p) for f in scene.fiducials],
    }


# ------------------------------------------------------------- handlers

def _handle_load_scene(session, msg):
    if "seed" in msg:
        session.scene = generate_scene(int(msg["seed"]))
    elif "scene" in msg:
        session.scene = scene_from_dict(msg["scene"])
    else:
        return [_fail(msg.get("id"), "protocol",
                      detail="load_scene needs seed or scene")]
    profile = msg.get("profile", session.profile_name)
    if profile not in PROFILES:
        return [_fail(msg.get("id"), "protocol",
                      detail=f"unknown profile {profile!r}")]
    session.profile_name = profile
    session.tick_stride = int(msg.get("tick_stride", session.tick_stride))
    return [_ok(msg.get("id"), scene_hash=scene_hash(session.scene),
                profile=profile),
            _event("scene", geometry=_scene_geometry(session.scene))]


def _handle_request_plans(session, msg):
    if session.scene is None:
        return [_fail(msg.get("id"), "protocol", detail="no scene loaded")]
    try:
        target = np.asarray(msg["target"], dtype=float).reshape(3)
    except (KeyError, ValueError, TypeError):
        return [_fail(msg.get("id"), "protocol", detail="bad target")]
    session.seed = int(msg.get("seed", 0))
    try:
        session.plans = plan_candidates(PlanRequest(
            scene=session.scene, target=target,
            k=int(msg.get("k", 4)), rng_seed=session.seed))
    except (NoPlanFound, PreconditionError) as e:
        return [_fail(msg.get("id"), "domain", detail=str(e))]
    session.target = target
    session.stage = STAGE_PLANNED
    summaries = [_plan_summary(i, p) for i, p in enumerate(session.plans)]
    return [_ok(msg.get("id"), candidates=summaries),
            _event("plans", candidates=summaries),
            _stage_event(session)]


def _handle_select_plan(session, msg):
    i = msg.get("i")
    if not isinstance(i, int) or not 0 <= i < len(session.plans):
        return [_fail(msg.get("id"), "protocol",
                      detail=f"plan index {i!r} out of range")]
    session.selected = i
    plan = session.plans[i]
    profile = PROFILES[session.profile_name]
    rng = np.random.default_rng(
        np.random.SeedSequence([session.seed, 1]))
    session.stage = STAGE_NAVIGATING
    nav_event = _event("navigation",
                       route=list(plan.bronchoscope_route),
                       plan=_plan_summary(i, plan),
                       path=_path_polyline(plan))
    achieved = _perturbed_pose(plan.piercing_pose,
                               profile.piercing_pos_noise,
                               profile.piercing_ang_noise, rng)
    session.tip = _advance_to_clearance(session.scene, achieved)
    events = [_ok(msg.get("id"), plan=_plan_summary(i, plan)),
              nav_event, _stage_event(session)]
    session.stage = STAGE_AIMING
    events.append(_stage_event(session))
    return events


def _handle_aim(session, msg):
    yaw = float(msg.get("yaw", 0.0))
    pitch = float(msg.get("pitch", 0.0))
    advance = float(msg.get("advance", 0.0))
    if abs(yaw) > MAX_AIM_STEP or abs(pitch) > MAX_AIM_STEP \
            or not 0.0 <= advance <= MAX_AIM_ADVANCE:
        return [_fail(msg.get("id"), "protocol",
                      detail="aim command outside actuator limits")]
    tip = session.tip
    tip = Pose(tip.p + advance * tip.heading,
               tip.R @ rot_y(yaw) @ rot_x(-pitch))
    session.tip = tip
    session.aim_attempts += 1
    chk = check_alignment(tip, session.target, session.scene)
    events = [_ok(msg.get("id"), heading_error=chk.heading_error,
                  suggested_correction=list(chk.correction)),
              _event("aim", tip=tip.p.tolist(),
                     heading=tip.heading.tolist(),
                     heading_error=chk.heading_error)]
    if session.stage == STAGE_ALIGNED:
        # the pose moved: alignment must be re-established
        session.stage = STAGE_AIMING
        events.append(_stage_event(session))
    return events


def _handle_query_alignment(session, msg):
    chk = check_alignment(session.tip, session.target, session.scene)
    events = [_ok(msg.get("id"), aligned=chk.aligned,
                  heading_error=chk.heading_error,
                  suggested_correction=list(chk.correction))]
    new_stage = STAGE_ALIGNED if chk.aligned else STAGE_AIMING
    if new_stage != session.stage:
        session.stage = new_stage
        events.append(_stage_event(session))
    return events


def _handle_start_autonomous(session, msg):
    scene = session.scene
    profile = PROFILES[session.profile_name]
    try:
        ex_plan = replan(session.tip, session.target, scene,
                         session.plans[session.selected],
                         rng_seed=session.seed + 1)
    except (NoPlanFound, PreconditionError) as e:
        return [_fail(msg.get("id"), "domain", detail=str(e))]
    session.executed_plan = ex_plan
    session.stage = STAGE_STEERING
    events = [_ok(msg.get("id"), length_mm=ex_plan.path_length,
                  path=_path_polyline(ex_plan)),
              _stage_event(session)]

    ss = np.random.SeedSequence([session.seed, 2])
    reg_rng, ctrl_rng, confirm_rng = [np.random.default_rng(s)
                                      for s in ss.spawn(3)]
    true_reg, reg_est = _registration_pair(scene, profile, reg_rng)
    ctx = SteeringContext.from_start(scene, profile.breath, session.tip,
                                     noise=profile.needle_noise,
                                     reg=true_reg, reg_est=reg_est,
                                     rng=ctrl_rng)
    rec = DeploymentRecord(scene_hash(scene), session.target, session.seed,
                           profile.name)
    rec.plan = session.plans[session.selected]
    rec.executed_plan = ex_plan
    rec.aim_attempts = session.aim_attempts
    stream = default_gate_stream(ctx)
    run_steering_stage(ctx, ex_plan, rec, stream)
    if rec.status == STATUS_COMPLETED:
        take_confirmation_sample(ctx, rec, stream,
                                 confirm_rng.uniform(
                                     *profile.confirm_delay))
    audit_record_truth(scene, rec)
    session.record = rec

    series = trajectory_error_series(rec) if rec.rows else []
    total = ex_plan.path_length
    # emit every stride-th tick, the final tick, and both sides of every
    # window transition: keeping the last open tick preserves the
    # gate-safety invariant (insertion only advances on open ticks) on
    # the decimated stream
    windows = [bool(row[7]) for row in rec.rows]
    keep = set()
    for k in range(len(rec.rows)):
        if k % session.tick_stride == 0 or k == len(rec.rows) - 1:
            keep.add(k)
        if k > 0 and windows[k] != windows[k - 1]:
            keep.update((k - 1, k))
    for k, (row, (t, err, in_window)) in enumerate(zip(rec.rows, series)):
        if k not in keep:
            continue
        tick = _event("tick", t=t, meas=list(row[1:4]),
                      window_open=bool(row[7]),
                      traj_err=err, inserted_mm=row[8],
                      progress=min(row[8] / max(total, 1e-9), 1.0))
        events.append(tick)
    session.last_gate = {"window_open": bool(rec.rows[-1][7])} \
        if rec.rows else None
    session.last_meas = {"position": list(rec.rows[-1][1:4])} \
        if rec.rows else None

    if rec.status == STATUS_COMPLETED:
        session.stage = STAGE_DONE
        events.append(_event("result",
                             targeting_error_mm=targeting_error(rec),
                             adverse_events=rec.adverse_events,
                             status=rec.status))
    else:
        session.stage = STAGE_ABORTED
        events.append(_event("result", status=rec.status,
                             adverse_events=rec.adverse_events))
    events.append(_stage_event(session))
    return events


def _handle_request_hold(session, msg):
    # autonomous steering triggers holds automatically; the reply carries
    # the latest gate snapshot so a console can surface it
    return [_ok(msg.get("id"), gate=session.last_gate,
                note="holds are automatic during autonomous steering")]


def _handle_abort(session, msg):
    session.stage = STAGE_ABORTED
    return [_ok(msg.get("id")), _stage_event(session)]


def _handle_get_record(session, msg):
    if session.record is None:
        return [_fail(msg.get("id"), "domain", detail="no record yet")]
    return [_ok(msg.get("id"), record=record_to_dict(session.record))]


def _handle_get_state(session, msg):
    return [_ok(msg.get("id"), stage=session.stage,
                sid=session.sid,
                scene_hash=(scene_hash(session.scene)
                            if session.scene else None),
                candidates=len(session.plans),
                selected=session.selected,
                geometry=(_scene_geometry(session.scene)
                          if session.scene else None))]


_HANDLERS = {
    "load_scene": (_handle_load_scene, (STAGE_IDLE,)),
    "request_plans": (_handle_request_plans, (STAGE_IDLE,)),
    "select_plan": (_handle_select_plan, (STAGE_PLANNED,)),
    "aim": (_handle_aim, (STAGE_AIMING, STAGE_ALIGNED)),
    "query_alignment": (_handle_query_alignment,
                        (STAGE_AIMING, STAGE_ALIGNED)),
    "start_autonomous": (_handle_start_autonomous, (STAGE_ALIGNED,)),
    "request_hold": (_handle_request_hold,
                     (STAGE_ALIGNED, STAGE_STEERING)),
    "abort": (_handle_abort, (STAGE_IDLE, STAGE_PLANNED, STAGE_NAVIGATING,
                              STAGE_AIMING, STAGE_ALIGNED,
                              STAGE_STEERING)),
    "get_record": (_handle_get_record, TERMINAL_STAGES),
    "get_state": (_handle_get_state, None),   # any stage
}


def handle_message(session: SessionState, msg) -> tuple:
    """Pure protocol step: returns (session, list of reply/event dicts).

    Malformed input gets a protocol error; a valid message in the wrong
    stage gets an out-of-order error naming the current stage.  State is
    unchanged in both cases.
    """
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        return session, [_fail(None, "protocol",
                               detail="message must be an object with a "
                                      "string 'type'")]
    if msg.get("v") != PROTOCOL_VERSION:
        return session, [_fail(msg.get("id"), "protocol",
                               detail=f"unsupported protocol version "
                                      f"{msg.get('v')!r}")]
    entry = _HANDLERS.get(msg["type"])
    if entry is None:
        return session, [_fail(msg.get("id"), "protocol",
                               detail=f"unknown type {msg['type']!r}")]
    handler, stages = entry
    if stages is not None and session.stage not in stages:
        return session, [_fail(msg.get("id"), "out_of_order",
                               stage=session.stage,
                               detail=f"{msg['type']} not valid in stage "
                                      f"{session.stage!r}")]
    return session, handler(session, msg)


def handle_lines(lines, session: SessionState | None = None) -> list:
    """One-shot request mode: feed NDJSON input lines through a single
    session and return the NDJSON output lines."""
    session = session or SessionState(sid="oneshot")
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            out.append(json.dumps(_fail(None, "protocol",
                                        detail="invalid JSON")))
            continue
        session, replies = handle_message(session, msg)
        out.extend(json.dumps(r) for r in replies)
    return out


# ---------------------------------------------------------------- server

SESSION_EXPIRY = 3600.0  # s


class _Registry:
    def __init__(self):
        self._sessions = {}
        self._lock = threading.Lock()

    def get_or_create(self, sid: str | None) -> SessionState:
        with self._lock:
            now = time.monotonic()
            self._sessions = {k: v for k, v in self._sessions.items()
                              if now - v[1] < SESSION_EXPIRY}
            if sid and sid in self._sessions:
                session = self._sessions[sid][0]
            else:
                session = SessionState(sid=sid or secrets.token_hex(8))
            self._sessions[session.sid] = (session, now)
            return session

    def touch(self, session: SessionState) -> None:
        with self._lock:
            self._sessions[session.sid] = (session, time.monotonic())


def serve_forever(host: str = "127.0.0.1", port: int = 7313,
                  ready_callback=None):
    """Blocking NDJSON-over-TCP server.

    The first message on a connection should be
    `{"v": 1, "type": "hello", "sid": optional}`; the reply carries the
    session id to reconnect with.
    """
    registry = _Registry()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            session = None
            for raw in self.rfile:
                try:
                    msg = json.loads(raw.decode())
                except (json.JSONDecodeError, UnicodeDecodeError):
                    self._send(_fail(None, "protocol",
                                     detail="invalid JSON"))
                    continue
                if isinstance(msg, dict) and msg.get("type") == "hello":
                    session = registry.get_or_create(msg.get("sid"))
                    self._send(_ok(msg.get("id"), sid=session.sid,
                                   stage=session.stage))
                    continue
                if session is None:
                    session = registry.get_or_create(None)
                session, replies = handle_message(session, msg)
                registry.touch(session)
                for r in replies:
                    self._send(r)

        def _send(self, obj):
            self.wfile.write((json.dumps(obj) + "\n").encode())
            self.wfile.flush()

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Server((host, port), Handler) as server:
        if ready_callback is not None:
            ready_callback(server.server_address)
        server.serve_forever()
