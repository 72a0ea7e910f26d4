import io

import numpy as np
import pytest

from lungsteer.anatomy import Scene, generate_scene, sample_target
from lungsteer.control import (
    MODE_IDLE,
    MODE_INSERTING,
    ControlParams,
    RollEstimate,
    SteeringContext,
    control_tick,
    estimate_roll,
    execute_segment,
    project_arclength,
    roll_in_canonical_frame,
    segment_length,
    segment_log_from_csv,
    segment_point_at,
)
from lungsteer.errors import (
    GateTimeout,
    PreconditionError,
    SafetyStop,
    SegmentIncomplete,
)
from lungsteer.geometry import (
    Arc,
    Pose,
    heading_pose,
    propagate_arc,
    steer_to_point,
    wrap_angle,
)
from lungsteer.needle import NeedleState, NoiseConfig, TipMeasurement, step
from lungsteer.planner import PlanRequest, plan_candidates, segment_plan
from lungsteer.respiration import PHASE_HOLDING, BreathModel, GateState


def free_scene(vessels=()):
    semi = np.array([200.0, 200.0, 200.0])
    return Scene(seed=0, pleura_center=np.zeros(3), pleura_semi_axes=semi,
                 airway_nodes=np.array([[0.0, 0, -180], [0.0, 0, -170]]),
                 airway_radii=np.array([3.0, 2.5]), airway_edges=((0, 1),),
                 vessels=tuple(vessels), target_regions=(), fiducials=(),
                 kappa_max=0.02, clearance_min=1.0)


def open_gate(t=0.0):
    return GateState(phase=PHASE_HOLDING, window_open=True, hold_elapsed=t,
                     t=t, hold_start=0.0)


def closed_gate(t=0.0):
    return GateState(t=t)


def arc_measurements(start, kappa, roll, total, ds=0.5):
    """Noiseless 5-DOF samples along one arc."""
    out = []
    for s in np.arange(0.0, total + 1e-9, ds):
        pose = propagate_arc(start, kappa, roll, s)
        out.append(TipMeasurement(pose.p, pose.heading, s))
    return out


class TestEstimateRoll:
    def test_stationary_spin_advances(self):
        m = TipMeasurement(np.zeros(3), np.array([0.0, 0, 1]), 0.0)
        est = estimate_roll([m], np.pi, RollEstimate(0.3))
        assert est.roll == pytest.approx(wrap_angle(0.3 + np.pi))

    def test_dead_reckoning_exact_on_straight_runs(self):
        rng = np.random.default_rng(0)
        state = NeedleState(Pose.identity(), 0.0, 0.4)
        est = RollEstimate(roll_in_canonical_frame(state.tip, state.roll))
        for spin in (0.0, 1.3, -2.2, 0.7):
            state = step(state, 0.0, spin, 1.0, 0.02, NoiseConfig.zero(),
                         rng)
            m = TipMeasurement(state.tip.p, state.tip.heading, 0.0)
            est = estimate_roll([m], spin * 1.0, est)
            truth = roll_in_canonical_frame(state.tip, state.roll)
            assert wrap_angle(est.roll - truth) == pytest.approx(0.0,
                                                                 abs=1e-12)

    def test_converges_from_injected_offset(self):
        start = Pose.identity()
        canonical = heading_pose(start.p, start.heading)
        # bend plane = canonical +x: find the body roll matching it
        hist = arc_measurements(canonical, 0.02, 0.0, 20.0)
        true_roll = 0.0  # in the canonical frame by construction
        est = RollEstimate(true_roll + np.deg2rad(10.0))
        # sliding 6 mm windows, as the executor would feed them
        win = 13  # samples of 0.5 mm
        for i in range(0, len(hist) - win):
            est = estimate_roll(hist[i:i + win], 0.0, est)
        err = abs(wrap_angle(est.roll - true_roll))
        assert err <= np.deg2rad(2.0)
        assert est.confidence > 0.5

    def test_short_history_skips_correction(self):
        hist = arc_measurements(Pose.identity(), 0.02, 0.0, 2.0)
        est = estimate_roll(hist, 0.0, RollEstimate(1.0))
        assert est.roll == pytest.approx(1.0)

    def test_needs_measurement(self):
        with pytest.raises(PreconditionError):
            estimate_roll([], 0.0, RollEstimate(0.0))


class TestControlTick:
    params = ControlParams()

    def aligned_setup(self, kappa=0.02):
        seg = [Arc(Pose.identity(), kappa, 10.0, 0.0)]
        meas = TipMeasurement(np.zeros(3), np.array([0.0, 0, 1]), 0.0)
        pose = heading_pose(meas.position, meas.heading)
        ref = segment_point_at(seg, self.params.lookahead)
        roll_d, _, _ = steer_to_point(pose, ref)
        return seg, meas, RollEstimate(roll_d)

    def test_on_plan_inserting(self):
        seg, meas, est = self.aligned_setup()
        cmd = control_tick(meas, seg, est, open_gate(), self.params)
        assert cmd.mode == MODE_INSERTING
        assert cmd.insert_v == pytest.approx(self.params.insert_v)
        assert abs(cmd.spin_w) < 0.2

    def test_window_closed_idles(self):
        seg, meas, est = self.aligned_setup()
        bad_est = RollEstimate(est.roll + np.pi)  # even badly misaligned
        cmd = control_tick(meas, seg, bad_est, closed_gate(), self.params)
        assert (cmd.insert_v, cmd.spin_w, cmd.mode) == (0.0, 0.0, MODE_IDLE)

    def test_lateral_error_sign(self):
        # tip 2 mm toward -x of a straight +z plan: commanded bend plane
        # must point back toward +x
        seg = [Arc(Pose.identity(), 0.0, 40.0, 0.0)]
        meas = TipMeasurement(np.array([-2.0, 0, 10.0]),
                              np.array([0.0, 0, 1]), 0.0)
        cmd = control_tick(meas, seg, RollEstimate(0.0), open_gate(),
                           self.params)
        frame = heading_pose(meas.position, meas.heading)
        bend_world = frame.R @ np.array([np.cos(cmd.target_roll),
                                         np.sin(cmd.target_roll), 0.0])
        assert bend_world @ np.array([1.0, 0, 0]) > 0.5

    def test_spin_rate_capped(self):
        seg = [Arc(Pose.identity(), 0.02, 10.0, 0.0)]
        meas = TipMeasurement(np.array([2.0, 0, 3.0]),
                              np.array([0.0, 0, 1]), 0.0)
        for roll in np.linspace(-np.pi, np.pi, 17):
            cmd = control_tick(meas, seg, RollEstimate(roll), open_gate(),
                               self.params)
            assert abs(cmd.spin_w) <= self.params.spin_max + 1e-12


class TestSegmentHelpers:
    def test_project_and_point_roundtrip(self):
        seg = [Arc(Pose.identity(), 0.015, 12.0, 0.8)]
        for s in (0.0, 3.3, 7.1, 12.0):
            p = segment_point_at(seg, s)
            assert project_arclength(seg, p) == pytest.approx(s, abs=0.15)

    def test_segment_length(self):
        seg = [Arc(Pose.identity(), 0.0, 4.0, 0.0),
               Arc(propagate_arc(Pose.identity(), 0.0, 0.0, 4.0),
                   0.01, 6.0, 1.0)]
        assert segment_length(seg) == pytest.approx(10.0)


def max_curvature_segment(length=10.0):
    return [Arc(Pose.identity(), 0.02, length, 0.0)]


class TestExecuteSegment:
    def make_ctx(self, scene=None, breath=None, **kw):
        scene = scene or free_scene()
        breath = breath or BreathModel(noise=0.0)
        return SteeringContext.from_start(scene, breath, Pose.identity(),
                                          **kw)

    def test_completes_with_margin(self):
        # 10 mm at 2 mm/s inside a 10 s hold
        ctx = self.make_ctx()
        seg = max_curvature_segment(10.0)
        ctx.roll_est = RollEstimate(
            steer_to_point(heading_pose(np.zeros(3), [0, 0, 1]),
                           segment_point_at(seg, 5.0))[0])
        log = execute_segment(ctx, seg)
        assert log.completed
        margin = ctx.gate.hold_start + ctx.params.window_len - ctx.t
        assert margin >= 5.0 - 2 * ctx.params.tick
        assert log.insert_window_ok()

    def test_early_release_queues_remainder(self):
        ctx = self.make_ctx(breath=BreathModel(amplitude=0.0, noise=0.0))
        seg = [Arc(Pose.identity(), 0.0, 10.0, 0.0)]

        def faulty_stream(t, want_hold):
            g = GateState(phase=PHASE_HOLDING, window_open=True,
                          hold_elapsed=t - 1.0, t=t, hold_start=1.0) \
                if 1.0 - 1e-9 <= t < 5.0 - 1e-9 else GateState(t=t)
            ctx.gate = g
            return g

        with pytest.raises(SegmentIncomplete) as e:
            execute_segment(ctx, seg, gate_stream=faulty_stream)
        assert e.value.remaining_mm == pytest.approx(2.0, abs=0.15)
        assert e.value.log.insert_window_ok()

    def test_gate_timeout(self):
        ctx = self.make_ctx()
        ctx.params = ControlParams(max_gate_wait=3.0)

        def never_opens(t, want_hold):
            ctx.gate = GateState(t=t)
            return ctx.gate

        with pytest.raises(GateTimeout):
            execute_segment(ctx, max_curvature_segment(6.0),
                            gate_stream=never_opens)

    def test_safety_stop_on_breach(self):
        # straight hand-made segment driven directly into a vessel
        vessel = ((-30.0, 0, 15.0), (30.0, 0, 15.0), 5.0)
        ctx = self.make_ctx(scene=free_scene([vessel]))
        seg = [Arc(Pose.identity(), 0.0, 18.0, 0.0)]
        with pytest.raises(SafetyStop):
            execute_segment(ctx, seg)
        assert ctx.needle.tip.p[2] >= 9.5  # stopped at the wall, not before

    def test_segment_too_long(self):
        ctx = self.make_ctx()
        with pytest.raises(PreconditionError):
            execute_segment(ctx, max_curvature_segment(25.0))

    def test_csv_roundtrip(self):
        ctx = self.make_ctx()
        log = execute_segment(ctx, max_curvature_segment(6.0))
        back = segment_log_from_csv(io.StringIO(log.to_csv_str()))
        assert len(back.rows) == len(log.rows)
        assert back.rows[0][0] == pytest.approx(log.rows[0][0])
        assert [r[1] for r in back.rows] == [r[1] for r in log.rows]
        assert [r[10] for r in back.rows] == [r[10] for r in log.rows]


class TestClosedLoopRegression:
    def test_noiseless_accuracy(self):
        """Zero noise, zero respiration amplitude: final error <= 0.5 mm,
        paired trajectory error <= 1.0 mm."""
        scene = generate_scene(1)
        breath = BreathModel(amplitude=0.0, noise=0.0)
        for tseed in (500, 504):
            target = sample_target(scene, tseed)
            plan = plan_candidates(PlanRequest(scene=scene, target=target,
                                               rng_seed=100))[0]
            ctx = SteeringContext.from_start(scene, breath,
                                             plan.needle_path[0].start)
            worst = 0.0
            for seg in segment_plan(list(plan.needle_path)):
                log = execute_segment(ctx, seg)
                assert log.completed
                assert log.insert_window_ok()
                worst = max(worst, log.max_traj_err())
            final = np.linalg.norm(ctx.needle.tip.p - plan.target)
            assert final <= 0.5
            assert worst <= 1.0

    def test_segment_per_window_cadence(self):
        scene = generate_scene(1)
        breath = BreathModel(noise=0.0)
        target = sample_target(scene, 506)
        plan = plan_candidates(PlanRequest(scene=scene, target=target,
                                           rng_seed=100))[0]
        segs = segment_plan(list(plan.needle_path))
        ctx = SteeringContext.from_start(scene, breath,
                                         plan.needle_path[0].start)
        holds = []
        for seg in segs:
            log = execute_segment(ctx, seg)
            assert log.completed
            holds.append(ctx.gate.hold_start)
        # one fresh hold per segment, strictly increasing
        assert len(set(holds)) == len(segs)
        assert holds == sorted(holds)
