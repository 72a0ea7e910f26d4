"""Closed-loop trajectory following for the autonomous steering stage.

A pure-pursuit law recomputes, every tick, the constant-curvature arc from
the measured tip pose to a lookahead point on the planned segment; the
bend plane of that arc sets the target bevel roll.  Because the sensor is
5-DOF, roll is dead-reckoned from commanded spin and periodically
corrected by fitting the bend plane of the recent measured positions.
Insertion only ever happens while the respiration gate's safe window is
open.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .anatomy import Scene, clearance_batch
from .errors import GateTimeout, PreconditionError, SafetyStop, \
    SegmentIncomplete
from .geometry import heading_pose, propagate_arc, steer_to_point, \
    wrap_angle
from .needle import NeedleState, NoiseConfig, TipMeasurement, sense, step
from .registration import RigidTransform
from .respiration import DEFAULT_WINDOW_LEN, BreathModel, GateState, \
    gate_update, marker_displacement, tissue_offset_from_reference

MODE_IDLE = "idle"
MODE_SPINNING = "spinning_to_roll"
MODE_INSERTING = "inserting"

LOG_HEADER = ("t", "mode", "insert_v", "spin", "meas_x", "meas_y", "meas_z",
              "true_x", "true_y", "true_z", "window_open", "traj_err")


@dataclass(frozen=True)
class ControlParams:
    tick: float = 0.05            # s
    insert_v: float = 2.0         # mm/s
    lookahead: float = 5.0        # mm
    roll_gate: float = np.deg2rad(20.0)
    spin_max: float = 2 * np.pi   # rad/s
    kappa_needle: float = 0.02    # 1/mm, natural bevel curvature
    straight_kappa: float = 0.002  # below this, drill straight by spinning
    min_pursuit: float = 2.0      # mm, shortest meaningful pursuit range
    realign_offset: float = 1.0   # mm off-path before a spin-in-place pause
    meas_filter: float = 0.3      # EMA gain on measurements fed to control
    window_len: float = DEFAULT_WINDOW_LEN
    max_gate_wait: float = 60.0   # s
    duty_cycle: bool = False      # proportional curvature modulation
    duty_cycle_len: float = 4.0   # mm of insertion per duty period
    fit_span: float = 5.0         # mm of history before roll correction
    fit_blend: float = 0.35

    def __post_init__(self):
        if self.tick <= 0 or self.insert_v <= 0 or self.lookahead <= 0:
            raise PreconditionError("tick, insert_v, lookahead must be > 0")


@dataclass(frozen=True)
class ControlCommand:
    insert_v: float   # mm/s, >= 0
    spin_w: float     # rad/s
    mode: str
    target_roll: float = 0.0  # rad, commanded bend plane (diagnostic)


@dataclass(frozen=True)
class RollEstimate:
    roll: float            # rad, wrapped to (-pi, pi]
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "roll", wrap_angle(self.roll))
        object.__setattr__(self, "confidence",
                          float(np.clip(self.confidence, 0.0, 1.0)))


def roll_in_canonical_frame(tip, roll: float) -> float:
    """Express a body-frame bevel roll in the canonical heading frame used
    by the controller (needed to initialize dead-reckoning exactly)."""
    bend_world = tip.R @ np.array([np.cos(roll), np.sin(roll), 0.0])
    frame = heading_pose(tip.p, tip.heading)
    local = frame.R.T @ bend_world
    return float(np.arctan2(local[1], local[0]))


def estimate_roll(history, commanded_spin_integral: float,
                  prior: RollEstimate, fit_span: float = 5.0,
                  blend: float = 0.35) -> RollEstimate:
    """Dead-reckon roll from commanded spin; correct from the bend plane of
    the measured positions once enough curved insertion history exists.

    `history` is a sequence of TipMeasurements taken while the bevel was
    (nearly) stationary; pass a short history to skip the correction.
    """
    if len(history) == 0:
        raise PreconditionError("estimate_roll needs >= 1 measurement")
    base = wrap_angle(prior.roll + commanded_spin_integral)
    pts = np.array([m.position for m in history], dtype=float)
    span = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) \
        if len(pts) > 1 else 0.0
    if span < fit_span:
        return RollEstimate(base, prior.confidence)
    h0 = np.asarray(history[0].heading, dtype=float)
    chord = pts[-1] - pts[0]
    lateral = chord - (chord @ h0) * h0
    lat_norm = float(np.linalg.norm(lateral))
    if lat_norm < 0.05:
        # straight history: bend plane unobservable
        return RollEstimate(base, prior.confidence)
    bend_dir = lateral / lat_norm
    frame = heading_pose(history[-1].position, history[-1].heading)
    local = frame.R.T @ bend_dir
    measured = float(np.arctan2(local[1], local[0]))
    fused = wrap_angle(base + blend * wrap_angle(measured - base))
    # confidence from the out-of-plane residual of the position history
    n = np.cross(h0, bend_dir)
    n /= max(np.linalg.norm(n), 1e-12)
    resid = float(np.sqrt(np.mean(((pts - pts[0]) @ n) ** 2)))
    return RollEstimate(fused, 1.0 - min(resid / 1.0, 1.0))


def _segment_samples(segment, ds: float = 0.25):
    """(points, cumulative arclengths) along a chained-arc segment."""
    pts = [segment[0].start.p[None]]
    ss = [np.zeros(1)]
    s0 = 0.0
    for arc in segment:
        n = max(1, int(np.ceil(arc.arclength / ds)))
        pts.append(arc.points(ds, include_start=False))
        ss.append(s0 + np.linspace(0.0, arc.arclength, n + 1)[1:])
        s0 += arc.arclength
    return np.concatenate(pts, axis=0), np.concatenate(ss)


def segment_length(segment) -> float:
    return float(sum(a.arclength for a in segment))


def segment_point_at(segment, s: float) -> np.ndarray:
    """Exact position at arclength s along the segment (clamped)."""
    s = max(0.0, s)
    for arc in segment:
        if s <= arc.arclength + 1e-12:
            return propagate_arc(arc.start, arc.curvature, arc.roll,
                                 min(s, arc.arclength)).p
        s -= arc.arclength
    return segment[-1].end.p


def project_arclength(segment, position) -> float:
    """Arclength of the sampled segment point nearest to `position`."""
    pts, ss = _segment_samples(segment)
    i = int(np.argmin(np.linalg.norm(pts - np.asarray(position), axis=1)))
    return float(ss[i])


def control_tick(meas: TipMeasurement, plan_segment, roll_est: RollEstimate,
                 gate: GateState, params: ControlParams) -> ControlCommand:
    """One pure-pursuit control decision.

    Window closed -> idle.  Otherwise steer toward the point `lookahead`
    mm beyond the nearest plan arclength: spin in place when the bend
    plane is badly off, drill (spin fast while inserting) when the desired
    curvature is near zero, and insert with proportional roll correction
    otherwise.
    """
    if not gate.window_open:
        return ControlCommand(0.0, 0.0, MODE_IDLE, roll_est.roll)
    total = segment_length(plan_segment)
    s_star = project_arclength(plan_segment, meas.position)
    ref = segment_point_at(plan_segment, min(s_star + params.lookahead,
                                             total))
    pose = heading_pose(meas.position, meas.heading)
    if np.linalg.norm(ref - meas.position) < params.min_pursuit:
        # reference within sensing-noise range: bend plane is meaningless
        # and curvature can barely act; finish straight while drilling
        return ControlCommand(params.insert_v, params.spin_max,
                              MODE_INSERTING, roll_est.roll)
    try:
        roll_d, kappa_d, _ = steer_to_point(pose, ref)
    except ValueError:
        # reference at/behind the tip: finish straight
        return ControlCommand(params.insert_v, params.spin_max,
                              MODE_INSERTING, roll_est.roll)
    kappa_d = min(kappa_d, params.kappa_needle)
    err = wrap_angle(roll_d - roll_est.roll)
    correction = float(np.clip(err / params.tick, -params.spin_max,
                               params.spin_max))
    if kappa_d < params.straight_kappa and not params.duty_cycle:
        # drilling: continuous fast spin averages the bend plane out
        return ControlCommand(params.insert_v, params.spin_max,
                              MODE_INSERTING, roll_d)
    if params.duty_cycle:
        frac = kappa_d / params.kappa_needle
        phase = (s_star % params.duty_cycle_len) / params.duty_cycle_len
        spin = correction if phase < frac else params.spin_max
        return ControlCommand(params.insert_v, spin, MODE_INSERTING, roll_d)
    off_path = float(np.linalg.norm(
        segment_point_at(plan_segment, s_star) - meas.position))
    if abs(err) > params.roll_gate and \
            kappa_d >= 0.5 * params.kappa_needle and \
            off_path >= params.realign_offset:
        # bend plane is load-bearing and badly off: realign before inserting
        return ControlCommand(0.0, correction, MODE_SPINNING, roll_d)
    return ControlCommand(params.insert_v, correction, MODE_INSERTING,
                          roll_d)


@dataclass
class SteeringContext:
    """Mutable simulation context threaded through segment execution.

    The engine owns one per deployment; tests build them directly.  `reg`
    is the true EM-to-scene transform applied by the sensor; `reg_est` is
    the controller's estimate used to map measurements back.
    """

    scene: Scene
    breath: BreathModel
    needle: NeedleState
    gate: GateState
    params: ControlParams = field(default_factory=ControlParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig.zero)
    reg: RigidTransform = field(default_factory=RigidTransform.identity)
    reg_est: RigidTransform = field(
        default_factory=RigidTransform.identity)
    rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))
    roll_est: RollEstimate = field(
        default_factory=lambda: RollEstimate(0.0))
    t: float = 0.0
    # (measurement, |spin| that tick) pairs for the roll estimator
    _recent: list = field(default_factory=list)
    _filt: TipMeasurement | None = None

    def filtered(self, meas: TipMeasurement) -> TipMeasurement:
        """Low-pass the measurement stream fed to the control law."""
        a = self.params.meas_filter
        if self._filt is None or a >= 1.0:
            self._filt = meas
            return meas
        pos = self._filt.position + a * (meas.position - self._filt.position)
        head = self._filt.heading + a * (meas.heading - self._filt.heading)
        head = head / np.linalg.norm(head)
        self._filt = TipMeasurement(pos, head, meas.timestamp)
        return self._filt

    @staticmethod
    def from_start(scene, breath, start_tip, **kw) -> "SteeringContext":
        needle = NeedleState(start_tip, 0.0, 0.0)
        ctx = SteeringContext(scene=scene, breath=breath, needle=needle,
                              gate=GateState.initial(), **kw)
        ctx.roll_est = RollEstimate(
            roll_in_canonical_frame(start_tip, needle.roll))
        return ctx

    def sense_tip(self) -> TipMeasurement:
        """Measure the tip where the breathing tissue currently holds it."""
        marker = marker_displacement(self.breath, self.t, self.gate)
        offset = tissue_offset_from_reference(self.breath,
                                              self.needle.tip.p, marker)
        from .geometry import Pose
        inst = NeedleState(Pose(self.needle.tip.p + offset,
                                self.needle.tip.R),
                           self.needle.inserted, self.needle.roll)
        m = sense(inst, self.reg, self.noise, self.rng, t=self.t)
        return TipMeasurement(self.reg_est.apply(m.position),
                              self.reg_est.apply_dir(m.heading), m.timestamp)

    def fit_history(self):
        """Trailing measurements over which the bevel was near-stationary."""
        out = []
        spin_acc = 0.0
        for meas, spin_abs in reversed(self._recent):
            spin_acc += spin_abs
            if spin_acc > 0.15:
                break
            out.append(meas)
        out.reverse()
        return out


def default_gate_stream(ctx: SteeringContext):
    """Standard gate driver: advances the respiration state machine."""
    def stream(t: float, want_hold: bool) -> GateState:
        ctx.gate = gate_update(ctx.gate, ctx.breath, t, want_hold,
                               ctx.params.window_len)
        return ctx.gate
    return stream


@dataclass
class SegmentLog:
    rows: list              # tuples matching LOG_HEADER
    completed: bool
    remaining_mm: float

    def insert_window_ok(self) -> bool:
        """Safety gate: every inserting tick had the window open."""
        return all(bool(r[10]) for r in self.rows if r[2] > 0)

    def max_traj_err(self) -> float:
        errs = [r[11] for r in self.rows if np.isfinite(r[11])]
        return float(max(errs)) if errs else float("nan")

    def to_csv(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._write(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as f:
                self._write(f)

    def _write(self, f) -> None:
        w = csv.writer(f)
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7],
                        r[8], r[9], int(r[10]), r[11]])

    def to_csv_str(self) -> str:
        buf = io.StringIO()
        self._write(buf)
        return buf.getvalue()


def segment_log_from_csv(path_or_file) -> SegmentLog:
    if hasattr(path_or_file, "read"):
        rows = list(csv.reader(path_or_file))
    else:
        with open(path_or_file, newline="") as f:
            rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOG_HEADER
    out = []
    for r in rows[1:]:
        out.append((float(r[0]), r[1], float(r[2]), float(r[3]),
                    float(r[4]), float(r[5]), float(r[6]), float(r[7]),
                    float(r[8]), float(r[9]), bool(int(r[10])),
                    float(r[11])))
    return SegmentLog(out, completed=True, remaining_mm=0.0)


def execute_segment(ctx: SteeringContext, segment,
                    gate_stream=None) -> SegmentLog:
    """Run one planned segment across a single breath-hold window.

    Requests a hold, waits for the window, inserts the segment's arclength
    under closed-loop control, and returns the tick log.  The window
    closing early raises SegmentIncomplete (with the partial log attached
    as `.log`); a true-state clearance breach raises SafetyStop; the gate
    never opening raises GateTimeout.
    """
    total = segment_length(segment)
    max_v = ctx.params.insert_v
    if total > ctx.params.window_len * max_v + 1e-9:
        raise PreconditionError(
            f"segment of {total:.1f} mm cannot finish inside a "
            f"{ctx.params.window_len:.0f} s window at {max_v} mm/s")
    stream = gate_stream or default_gate_stream(ctx)
    tick = ctx.params.tick
    inserted0 = ctx.needle.inserted
    wait_start = ctx.t
    was_open = False
    rows = []

    def progress():
        return ctx.needle.inserted - inserted0

    # each segment starts at the beginning of its own hold: let any window
    # still open from the previous segment run out first
    while ctx.gate.window_open:
        ctx.t = round((ctx.t + tick) / tick) * tick
        gate = stream(ctx.t, False)
        meas = ctx.sense_tip()
        ctx.filtered(meas)
        rows.append((ctx.t, MODE_IDLE, 0.0, 0.0, *meas.position,
                     *ctx.needle.tip.p, gate.window_open, float("nan")))
    wait_start = ctx.t

    while True:
        ctx.t = round((ctx.t + tick) / tick) * tick
        gate = stream(ctx.t, True)
        meas = ctx.sense_tip()
        fmeas = ctx.filtered(meas)
        if not gate.window_open:
            if was_open:
                log = SegmentLog(rows, False, total - progress())
                exc = SegmentIncomplete(
                    f"window closed with {total - progress():.2f} mm left",
                    remaining_mm=total - progress())
                exc.log = log
                raise exc
            if ctx.t - wait_start > ctx.params.max_gate_wait:
                raise GateTimeout(
                    f"window did not open within "
                    f"{ctx.params.max_gate_wait:.0f} s")
            rows.append((ctx.t, MODE_IDLE, 0.0, 0.0, *meas.position,
                         *ctx.needle.tip.p, False, float("nan")))
            continue
        was_open = True
        cmd = control_tick(fmeas, segment, ctx.roll_est, gate, ctx.params)
        remaining = total - progress()
        if cmd.insert_v * tick > remaining:
            cmd = replace(cmd, insert_v=remaining / tick)
        ctx.needle = step(ctx.needle, cmd.insert_v, cmd.spin_w, tick,
                          ctx.params.kappa_needle, ctx.noise, ctx.rng)
        ctx._recent.append((fmeas, abs(cmd.spin_w) * tick))
        if len(ctx._recent) > 400:
            del ctx._recent[:-400]
        ctx.roll_est = estimate_roll(ctx.fit_history() or [fmeas],
                                     cmd.spin_w * tick, ctx.roll_est,
                                     fit_span=ctx.params.fit_span,
                                     blend=ctx.params.fit_blend)
        if float(clearance_batch(ctx.scene,
                                 ctx.needle.tip.p[None])[0]) < 0.0:
            log = SegmentLog(rows, False, total - progress())
            exc = SafetyStop("true tip breached an obstacle")
            exc.log = log
            raise exc
        traj_err = float(np.linalg.norm(
            meas.position - segment_point_at(segment, progress())))
        rows.append((ctx.t, cmd.mode, cmd.insert_v, cmd.spin_w,
                     *meas.position, *ctx.needle.tip.p, True, traj_err))
        if progress() >= total - 1e-9:
            return SegmentLog(rows, True, 0.0)
