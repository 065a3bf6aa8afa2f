"""Exception hierarchy shared by every altslim module."""


class AltSlimError(Exception):
    pass


class InvalidShape(AltSlimError, ValueError):
    pass


class NumericOverflow(AltSlimError, ArithmeticError):
    pass


class NoTape(AltSlimError, RuntimeError):
    """Raised when backward is called on a tensor with no recorded history."""


class TapeConsumed(AltSlimError, RuntimeError):
    """Raised when backward runs twice over the same recorded graph."""


class InvalidConfig(AltSlimError, ValueError):
    pass


class InvalidTargets(AltSlimError, ValueError):
    pass


class InvalidInput(AltSlimError, ValueError):
    pass


class InvalidRatio(AltSlimError, ValueError):
    pass


class InvalidMode(AltSlimError, ValueError):
    pass


class PlanRejected(AltSlimError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "plan rejected")


class OracleUnavailable(AltSlimError, RuntimeError):
    pass


class CorruptCheckpoint(AltSlimError, ValueError):
    pass


class CorruptDataset(AltSlimError, ValueError):
    pass


class DataIoError(AltSlimError, OSError):
    pass


class PhaseError(AltSlimError, RuntimeError):
    """Wraps a failure inside one pipeline phase, keeping the phase label."""

    def __init__(self, phase, cause):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase!r} failed: {cause}")
