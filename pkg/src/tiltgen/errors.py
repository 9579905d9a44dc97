"""Exception taxonomy shared by all tiltgen modules."""


class TiltgenError(Exception):
    """Base class for all tiltgen errors."""


class ContractError(TiltgenError, ValueError):
    """A caller violated an operation precondition (shape, range, ...)."""


class CapabilityError(TiltgenError):
    """The requested operation is not available for this object kind."""


class NumericError(TiltgenError, ArithmeticError):
    """A computation produced a non-finite intermediate value."""


class DegenerateCriterionError(TiltgenError):
    """Criterion has (numerically) zero variance under the base model."""


class FlatCriterionError(TiltgenError):
    """Criterion variance under q is below the noise floor: beta has no effect."""


class RareEventError(TiltgenError):
    """Rejection sampling exhausted its attempt budget."""

    def __init__(self, message, attempts=0, accepted=0):
        super().__init__(message)
        self.attempts = attempts
        self.accepted = accepted


class DivergenceError(TiltgenError):
    """The variational fit produced a non-finite objective; carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ConfigError(TiltgenError, ValueError):
    """Run configuration failed schema or semantic validation."""
