import numpy as np
import pytest

from lungsteer.respiration import (
    PHASE_COOLDOWN,
    PHASE_HOLDING,
    BreathModel,
    GateState,
    gate_update,
    marker_displacement,
    tissue_displacement,
    tissue_offset_from_reference,
)


def run_gate(model, times, hold_request_fn, window_len=10.0):
    """Drive the gate over a tick schedule; returns the state trace."""
    gate = GateState.initial()
    trace = []
    for t in times:
        gate = gate_update(gate, model, t, hold_request_fn(t), window_len)
        trace.append(gate)
    return trace


class TestMarkerDisplacement:
    def test_free_breathing_peak(self):
        m = BreathModel(noise=0.0)
        assert marker_displacement(m, m.period / 2) == pytest.approx(
            m.amplitude)

    def test_free_breathing_trough(self):
        m = BreathModel(noise=0.0)
        assert marker_displacement(m, 0.0) == pytest.approx(0.0)
        assert marker_displacement(m, m.period) == pytest.approx(0.0)

    def test_hold_drift_under_1mm_at_10s(self):
        m = BreathModel(noise=0.0)
        start = GateState(phase=PHASE_HOLDING, window_open=True,
                          hold_elapsed=0.0, hold_start=0.0)
        end = GateState(phase=PHASE_HOLDING, window_open=True,
                        hold_elapsed=10.0, hold_start=0.0)
        drift = marker_displacement(m, 0.0, start) - marker_displacement(
            m, 10.0, end)
        assert 0 <= drift < 1.0

    def test_40s_hold_drifts_more_than_10s(self):
        m = BreathModel(noise=0.0)

        def drift(T):
            g0 = GateState(phase=PHASE_HOLDING, hold_elapsed=0.0,
                           window_open=True, hold_start=0.0)
            g1 = GateState(phase=PHASE_HOLDING, hold_elapsed=T,
                           window_open=True, hold_start=0.0)
            return marker_displacement(m, 0, g0) - marker_displacement(
                m, T, g1)

        assert drift(40.0) > drift(10.0)


class TestGateUpdate:
    def test_hold_requested_mid_exhale_opens_at_next_peak(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.05, 20.0, 0.05)
        # request from t=3 (mid-exhale of the first cycle)
        trace = run_gate(m, times, lambda t: t >= 3.0)
        opened = [g for g in trace if g.window_open]
        assert opened
        # next peak after 3.0 s is at 6.0 s (peaks at 2, 6, 10 ...)
        assert opened[0].hold_start == pytest.approx(6.0, abs=1e-9)

    def test_two_cycle_separation(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.05, 80.0, 0.05)
        trace = run_gate(m, times, lambda t: True)
        starts = sorted({g.hold_start for g in trace if g.window_open})
        assert len(starts) >= 3
        gaps = np.diff(starts)
        # 10 s window + at least 2 full 4 s cycles
        assert (gaps >= 10.0 + 2 * m.period - 1e-9).all()

    def test_window_duration_exact(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.01, 30.0, 0.01)
        trace = run_gate(m, times, lambda t: True, window_len=10.0)
        hold_start = next(g.hold_start for g in trace if g.window_open)
        open_times = [g.t for g in trace
                      if g.window_open and g.hold_start == hold_start]
        start = min(open_times)
        end = max(open_times)
        # logical window is [hold_start, hold_start + 10)
        assert start >= hold_start - 1e-9
        assert end < hold_start + 10.0 + 1e-9
        assert end - start > 10.0 - 0.03

    def test_window_open_implies_holding(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.05, 60.0, 0.05)
        trace = run_gate(m, times, lambda t: 10 < t < 40)
        for g in trace:
            if g.window_open:
                assert g.phase == PHASE_HOLDING

    def test_cooldown_phase_after_release(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.05, 25.0, 0.05)
        trace = run_gate(m, times, lambda t: t < 5)
        released = [g for g in trace if g.holds_completed == 1
                    and not g.window_open]
        assert released
        assert released[0].phase == PHASE_COOLDOWN
        assert released[0].cycles_since_hold == 0

    def test_cycles_reset_on_hold_start(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.05, 10.0, 0.05)
        trace = run_gate(m, times, lambda t: True)
        first_open = next(g for g in trace if g.window_open)
        assert first_open.cycles_since_hold == 0

    def test_deterministic(self):
        m = BreathModel(noise=0.0)
        times = np.arange(0.05, 30.0, 0.05)
        a = run_gate(m, times, lambda t: t > 4)
        b = run_gate(m, times, lambda t: t > 4)
        assert a == b


class TestTissueDisplacement:
    def test_zero_marker(self):
        m = BreathModel()
        np.testing.assert_allclose(
            tissue_displacement(m, [10, 0, -5], 0.0), [0, 0, 0])

    def test_constant_coupling_linear_scaling(self):
        m = BreathModel(coupling_const=(0.0, 0.0, 0.5))
        np.testing.assert_allclose(
            tissue_displacement(m, [1, 2, 3], 6.0), [0, 0, 3.0])

    def test_smoothness(self):
        lin = ((0.001, 0, 0), (0, 0.001, 0), (0, 0, 0.002))
        m = BreathModel(coupling_const=(0.1, 0.1, 0.4), coupling_linear=lin)
        rng = np.random.default_rng(0)
        L = np.linalg.norm(np.asarray(lin), 2) * 6.0  # Lipschitz bound
        for _ in range(200):
            p = rng.uniform(-50, 50, size=3)
            q = p + rng.uniform(-1, 1, size=3)
            dp = tissue_displacement(m, p, 6.0)
            dq = tissue_displacement(m, q, 6.0)
            assert np.linalg.norm(dp - dq) <= L * np.linalg.norm(p - q) + 1e-9

    def test_reference_offset_zero_at_peak(self):
        m = BreathModel()
        np.testing.assert_allclose(
            tissue_offset_from_reference(m, [0, 0, 0], m.amplitude),
            [0, 0, 0])
