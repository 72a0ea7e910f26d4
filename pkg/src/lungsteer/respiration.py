"""Breathing waveform, breath-hold model and the safe-insertion-window
gating state machine.

Free breathing is a raised cosine of the chest-marker displacement; a hold
freezes the waveform at peak tidal volume with a slow deflation drift.
Holds may only begin at the analytic peak instant and only after at least
two complete free-breathing cycles since the previous hold.  Setting the
amplitude to zero reproduces the motionless ex vivo condition while the
gating cadence is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import PreconditionError

PHASE_INHALING = "inhaling"
PHASE_EXHALING = "exhaling"
PHASE_AT_PEAK = "at_peak"
PHASE_HOLDING = "holding"
PHASE_COOLDOWN = "post_hold_cooldown"

DEFAULT_WINDOW_LEN = 10.0  # s
MIN_FREE_CYCLES = 2


@dataclass(frozen=True)
class BreathModel:
    period: float = 4.0            # s
    amplitude: float = 6.0         # mm peak chest-marker displacement
    hold_drift_rate: float = 0.05  # mm/s deflation during holds
    noise: float = 0.0             # mm std on the marker readout
    coupling_const: tuple = (0.08, 0.05, 0.4)   # marker -> tissue gain
    coupling_linear: tuple = ((0.0,) * 3,) * 3  # d gain / d position (1/mm)
    coupling_ref: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.period <= 0:
            raise PreconditionError("period must be > 0")
        if self.amplitude < 0:
            raise PreconditionError("amplitude must be >= 0")

    def coupling(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        g = np.asarray(self.coupling_const, dtype=float)
        lin = np.asarray(self.coupling_linear, dtype=float)
        return g + lin @ (p - np.asarray(self.coupling_ref))


@dataclass(frozen=True)
class GateState:
    """Snapshot of the respiration gate.

    `breath_phase` is the accumulated free-breathing phase (rad); it does
    not advance during holds, so the waveform resumes from the peak when a
    hold releases.
    """

    phase: str = PHASE_INHALING
    window_open: bool = False
    hold_elapsed: float = 0.0
    cycles_since_hold: int = MIN_FREE_CYCLES
    t: float = 0.0
    breath_phase: float = 0.0
    hold_start: float | None = None
    holds_completed: int = 0
    # index of the next peak-tidal-volume instant (peak k sits at
    # accumulated phase pi + 2*pi*k); kept explicit so float rounding can
    # never double-count a peak
    next_peak_k: int = 0

    @staticmethod
    def initial(t: float = 0.0) -> "GateState":
        return GateState(t=t)


def _phase_name(breath_phase: float, after_hold: bool, cycles: int) -> str:
    if after_hold and cycles < MIN_FREE_CYCLES:
        return PHASE_COOLDOWN
    frac = breath_phase % (2 * np.pi)
    return PHASE_INHALING if frac < np.pi else PHASE_EXHALING


def gate_update(gate: GateState, model: BreathModel, t: float,
                hold_requested: bool,
                window_len: float = DEFAULT_WINDOW_LEN) -> GateState:
    """Advance the gate state machine to time t.

    A requested hold begins only at the next peak-tidal-volume instant and
    only once at least two free cycles have completed since the last hold;
    the window stays open for exactly `window_len` seconds.
    """
    if window_len <= 0:
        raise PreconditionError("window_len must be > 0")
    if t < gate.t:
        raise PreconditionError("gate time must not run backwards")

    if gate.phase == PHASE_HOLDING:
        elapsed = t - gate.hold_start
        if elapsed < window_len:
            return replace(gate, t=t, hold_elapsed=elapsed, window_open=True)
        # release: free breathing resumes from the hold's peak phase
        release_t = gate.hold_start + window_len
        free = t - release_t
        base_phase = np.pi + 2 * np.pi * (gate.next_peak_k - 1)
        new_phase = base_phase + 2 * np.pi * free / model.period
        k = gate.next_peak_k
        cycles = 0
        while np.pi + 2 * np.pi * k <= new_phase + 1e-9:
            cycles += 1
            k += 1
        return GateState(
            phase=_phase_name(new_phase, True, cycles),
            window_open=False,
            hold_elapsed=0.0,
            cycles_since_hold=cycles,
            t=t,
            breath_phase=new_phase,
            hold_start=None,
            holds_completed=gate.holds_completed + 1,
            next_peak_k=k,
        )

    dt = t - gate.t
    old = gate.breath_phase
    new = old + 2 * np.pi * dt / model.period
    cycles = gate.cycles_since_hold
    after_hold = gate.holds_completed > 0
    k = gate.next_peak_k
    while True:
        peak_phase = np.pi + 2 * np.pi * k
        if peak_phase > new + 1e-9:
            break
        cycles += 1
        if hold_requested and cycles >= MIN_FREE_CYCLES:
            peak_t = gate.t + (peak_phase - old) / (2 * np.pi) * model.period
            return GateState(
                phase=PHASE_HOLDING,
                window_open=True,
                hold_elapsed=t - peak_t,
                cycles_since_hold=0,
                t=t,
                breath_phase=peak_phase,
                hold_start=peak_t,
                holds_completed=gate.holds_completed,
                next_peak_k=k + 1,
            )
        k += 1
    return replace(gate, t=t, breath_phase=new, cycles_since_hold=cycles,
                   phase=_phase_name(new, after_hold, cycles),
                   window_open=False, hold_elapsed=0.0, next_peak_k=k)


def marker_displacement(model: BreathModel, t: float,
                        gate: GateState | None = None, rng=None) -> float:
    """Chest-marker displacement (mm) at time t.

    During a hold the marker sits near its peak value and deflates at the
    hold drift rate; free breathing follows the raised cosine.
    """
    if t < 0:
        raise PreconditionError("t must be >= 0")
    if gate is not None and gate.phase == PHASE_HOLDING:
        value = model.amplitude - model.hold_drift_rate * gate.hold_elapsed
    else:
        phase = gate.breath_phase if gate is not None \
            else 2 * np.pi * t / model.period
        value = model.amplitude * (1 - np.cos(phase)) / 2
    if rng is not None and model.noise > 0:
        value += model.noise * rng.standard_normal()
    return float(value)


def tissue_displacement(model: BreathModel, p, marker_disp: float
                        ) -> np.ndarray:
    """Parenchymal displacement at point p for a given marker displacement."""
    return model.coupling(p) * marker_disp


def tissue_offset_from_reference(model: BreathModel, p, marker_disp: float
                                 ) -> np.ndarray:
    """Displacement relative to the CT reference state (captured at peak
    tidal volume, marker = amplitude)."""
    return model.coupling(p) * (marker_disp - model.amplitude)
