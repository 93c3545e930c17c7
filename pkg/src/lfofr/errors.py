"""Exception types raised across the package.

All data/contract errors derive from :class:`LfofrError` (itself a
``ValueError``) so callers can catch one type at the CLI boundary.
"""

from __future__ import annotations


class LfofrError(ValueError):
    """Base class for package errors."""


# data model
class MismatchedRows(LfofrError):
    pass


class NonFiniteValue(LfofrError):
    def __init__(self, what: str, row: int, col: int | str):
        self.what = what
        self.row = row
        self.col = col
        super().__init__(f"non-finite value in {what} at row {row}, column {col}")


class NonMonotoneGrid(LfofrError):
    pass


class TooFewGridPoints(LfofrError):
    pass


class MissingIntercept(LfofrError):
    pass


class GridMismatch(LfofrError):
    pass


class DimensionMismatch(LfofrError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


# basis / smoothing
class DegenerateKnots(LfofrError):
    pass


class TooFewPoints(LfofrError):
    pass


# fitting
class SingularSystem(LfofrError):
    def __init__(self, message: str, condition: float = float("inf"), location: int | None = None):
        self.condition = condition
        self.location = location
        super().__init__(message)


class LocationFitError(LfofrError):
    """A pointwise fit failed; carries the grid index of the failing location."""

    def __init__(self, location: int, cause: Exception):
        self.location = location
        self.cause = cause
        super().__init__(f"location {location}: {cause}")


# covariance / inference
class InsufficientPairs(LfofrError):
    pass


class UnsupportedQ(LfofrError):
    pass


class NegativeVariance(LfofrError):
    pass


class SingularCovariance(LfofrError):
    pass


class BootstrapFailure(LfofrError):
    pass


class StudyFailure(LfofrError):
    pass


class ConfigError(LfofrError):
    """Invalid user configuration (mapped to exit code 2 by the CLI)."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


# warnings
class RankDeficientWarning(UserWarning):
    pass


class NonConvergenceWarning(UserWarning):
    pass
