"""Exception types raised by the solvers."""

from __future__ import annotations


class ConditioningError(ValueError):
    """The discretised linear system is singular or numerically indefinite."""


class NonConvergenceError(RuntimeError):
    """The active-set iteration stopped before certifying optimality.

    ``best`` holds the last iterate (a :class:`~pwconvex.constrained.QpSolution`)
    so callers can inspect or fall back to it.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class CyclingError(NonConvergenceError):
    """An active set repeated even under lowest-index tie breaking."""
