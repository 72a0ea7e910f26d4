"""Domain error types shared across modules."""


class LungsteerError(Exception):
    """Base class for all domain errors."""


class ConfigurationError(LungsteerError):
    """Invalid parameters or config overrides."""


class PreconditionError(LungsteerError):
    """An operation was called outside its contract."""


class DegenerateGeometryError(LungsteerError):
    """Point configuration too degenerate to register (e.g. collinear)."""


class CalibrationError(LungsteerError):
    """Fiducial calibration failed (e.g. duplicate sphere assignment)."""


class InfeasibleRegionError(LungsteerError):
    """Target sampling kept rejecting; region has no clear point."""


class NoPlanFound(LungsteerError):
    """Planner exhausted its budget without a valid plan."""

    def __init__(self, message: str, best_clearance: float = float("nan"),
                 samples_used: int = 0):
        super().__init__(message)
        self.best_clearance = best_clearance
        self.samples_used = samples_used


class SegmentIncomplete(LungsteerError):
    """Safe-insertion window closed before the segment finished."""

    def __init__(self, message: str, remaining_mm: float):
        super().__init__(message)
        self.remaining_mm = remaining_mm


class SafetyStop(LungsteerError):
    """True-state clearance breach; terminal for the deployment."""


class AlignmentFailed(LungsteerError):
    """Aiming stage exhausted its attempts without alignment."""


class GateTimeout(LungsteerError):
    """The gate never opened within the configured wait."""


class ProtocolError(LungsteerError):
    """Malformed or out-of-order session protocol message."""
