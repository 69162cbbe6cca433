"""Exception types raised across the package."""


class RBPError(Exception):
    """Base class for all package errors."""


class NonPositiveVariance(RBPError, ValueError):
    pass


class DegeneratePosterior(RBPError, ArithmeticError):
    pass


class LikelihoodUnderflow(RBPError, ArithmeticError):
    def __init__(self, msg, where=None):
        super().__init__(msg if where is None else f"{msg} at {where}")
        self.where = where


class MissingTruth(RBPError, ValueError):
    pass


class DomainError(RBPError, ValueError):
    pass


class MonotonicityViolation(RBPError, ArithmeticError):
    pass


class UnsupportedCalibration(RBPError, ValueError):
    pass


class SingularSystem(RBPError, ArithmeticError):
    pass


class ConfigError(RBPError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, msg, field=None):
        super().__init__(f"{field}: {msg}" if field else msg)
        self.field = field


class IterationError(RBPError):
    """A step error annotated with the iteration index where it happened."""

    def __init__(self, iteration, cause):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause
