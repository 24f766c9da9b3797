"""Exception hierarchy shared by every module."""


class MultiPoetError(Exception):
    """Base class for all package errors."""


class InvalidInput(MultiPoetError, ValueError):
    pass


class InvalidMatrix(InvalidInput):
    pass


class NotPositiveDefinite(MultiPoetError, ValueError):
    pass


class InsufficientData(InvalidInput):
    pass


class InvalidFactorCount(InvalidInput):
    pass


class InvalidResidualDiagonal(InvalidInput):
    pass


class UnknownGroup(InvalidInput, KeyError):
    pass


class InvalidKMax(InvalidInput):
    pass


class ClusteringFailed(MultiPoetError, RuntimeError):
    pass


class InvalidConfig(InvalidInput):
    pass


class GenerationFailed(MultiPoetError, RuntimeError):
    pass


class InfeasibleConstraint(InvalidInput):
    pass


class SolverFailed(MultiPoetError, RuntimeError):
    """Raised when the portfolio solver exhausts its iteration budget.

    The best feasible iterate is attached as ``solution`` so callers can
    still use it.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
