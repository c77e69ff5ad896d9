"""Exception hierarchy shared by all pipeline stages."""


class DuccError(Exception):
    """Base class for every error raised by this package."""


class FcidumpError(DuccError, ValueError):
    pass


class ParseError(FcidumpError):
    pass


class BoundsError(DuccError, IndexError):
    pass


class ConsistencyError(DuccError, ValueError):
    pass


class InvalidStateError(DuccError, ValueError):
    pass


class PreconditionError(DuccError, ValueError):
    pass


class DegeneracyError(DuccError, ArithmeticError):
    pass


class ConvergenceError(DuccError, RuntimeError):
    """Iterative solver stopped before meeting its tolerance.

    ``residual`` carries the last residual norm, ``state`` the best iterate.
    """

    def __init__(self, message, residual=None, state=None):
        super().__init__(message)
        self.residual = residual
        self.state = state


class DivergenceError(ConvergenceError):
    pass


class OptimizerError(ConvergenceError):
    pass


class UnsupportedRankError(DuccError, ValueError):
    pass


class FeasibilityError(DuccError, ValueError):
    pass


class StageError(DuccError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
