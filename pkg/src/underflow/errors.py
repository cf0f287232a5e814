"""Exception types raised across the package."""


class UnderflowError(Exception):
    """Base class for every error raised by this package."""


class SpecError(UnderflowError):
    """A problem specification failed validation."""


class InfeasiblePower(SpecError):
    pass


class NonConvexCurve(SpecError):
    pass


class BadStochasticMatrix(SpecError):
    pass


class OutOfRange(UnderflowError, ValueError):
    pass


class PreconditionViolated(UnderflowError):
    pass


class GridMisaligned(UnderflowError):
    pass


class MemoryBudgetExceeded(UnderflowError):
    pass


class MaxIterExceeded(UnderflowError):
    """Value iteration stopped before reaching the requested tolerance.

    The partial result is attached as ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DualSearchDiverged(UnderflowError):
    pass


class PolicyInfeasibleAction(UnderflowError):
    pass
