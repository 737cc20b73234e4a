"""
Exception hierarchy for the mechanism package.

Verification routines never raise for a failed check; they return reports.
The errors below are for invalid input and for numerical procedures that
cannot produce a result.
"""

from typing import Any, Optional


class MechanismError(Exception):
    """Base class for all package errors."""


class InputError(MechanismError):
    """Invalid scenario, profile or argument. The CLI maps these to exit code 2."""


class DimensionMismatch(InputError):
    pass


class NegativeRhs(InputError):
    pass


class InvalidParameter(InputError):
    pass


class UnboundedDomain(InputError):
    pass


class ScenarioError(InputError):
    pass


class Disconnected(InputError):
    pass


class InvalidHelper(InputError):
    pass


class MissingSummary(InputError):
    pass


class OutOfDomain(MechanismError):
    """A demand or price lies outside the range a utility is defined on."""


class SamplingFailed(MechanismError):
    pass


class NotStronglyConcave(MechanismError):
    pass


class Infeasible(MechanismError):
    pass


class MaxActiveSetIters(MechanismError):
    pass


class ProjectionFailed(MechanismError):
    pass


class NotConverged(MechanismError):
    """Iteration budget exhausted; carries the best iterate and its KKT report."""

    def __init__(self, message: str, best: Optional[Any] = None, report: Optional[Any] = None):
        super().__init__(message)
        self.best = best
        self.report = report


class KktFailed(MechanismError):
    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report


class BoundViolation(MechanismError):
    """Derivative bounds do not hold; `witness` is the offending demand matrix."""

    def __init__(self, message: str, witness: Optional[Any] = None, user: int = -1, slot: int = -1):
        super().__init__(message)
        self.witness = witness
        self.user = user
        self.slot = slot


class StepSizeTooLarge(UserWarning):
    """Learning step size above the bound that guarantees convergence."""
