"""Exception hierarchy shared by all modules."""


class GridPredictError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(GridPredictError, ValueError):
    """Bad input supplied by the caller (CLI exit code 1)."""


class NumericError(GridPredictError, ArithmeticError):
    """A numeric procedure failed at runtime (CLI exit code 2)."""


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class SingularSystem(NumericError):
    pass


class NotSymmetric(ValidationError):
    pass


class IsolatedNode(ValidationError):
    pass


class UnreachableBus(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


class BadRange(ValidationError):
    pass


class RateMismatch(ValidationError):
    pass


class ZeroSignal(ValidationError):
    pass


class SeriesTooShort(ValidationError):
    pass


class InputTooShort(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class ZeroActual(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class IncompatibleModel(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class EquilibriumNotFound(NumericError):
    pass


class DivergedSimulation(NumericError):
    pass


class NonFiniteLoss(NumericError):
    """Training diverged; try a smaller learning rate."""


class TapeConsumed(GridPredictError, RuntimeError):
    pass


class GradCheckFailed(NumericError):
    pass
