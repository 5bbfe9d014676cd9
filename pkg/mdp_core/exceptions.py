"""Exception hierarchy shared by the numerical apps.

Invariant violations of domain types raise
``django.core.exceptions.ValidationError``; the classes below cover numerical
failures that are not about malformed data.
"""
from typing import Optional


class OMDError(Exception):
    """Base class for every numerical failure raised by OMDLab."""


class DomainError(OMDError, ValueError):
    """An argument lies outside the domain of the operation (empty, NaN, alpha <= 0, gamma >= 1)."""


class ShapeMismatchError(OMDError, ValueError):
    """Array shapes handed to an operation are inconsistent with each other."""


class ConvergenceError(OMDError):
    """An iterative solver ran out of iterations before reaching its tolerance.

    Attributes:
        residual (float): The last residual the solver observed.
        iterations (int): Number of iterations performed.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class PreconditionError(OMDError):
    """A caller handed over data that does not satisfy the documented precondition."""


class NumericalError(OMDError):
    """A computation produced NaN/Inf or a singular system.

    Attributes:
        step (Optional[int]): The training step at which the failure surfaced, if any.
    """

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class SolverError(OMDError):
    """A linear solver broke down (zero curvature direction).

    Attributes:
        iterations (int): Iterations completed before the breakdown.
    """

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class UnsupportedOpError(OMDError):
    """A node of an autodiff graph has no vector-Jacobian product rule."""
