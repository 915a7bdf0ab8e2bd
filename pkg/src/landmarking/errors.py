"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class LandmarkingError(Exception):
    """Base class for errors raised by this package."""


class DataError(LandmarkingError, ValueError):
    """Input data violates a schema or a domain invariant."""


class EmptyDatasetError(DataError):
    """No subjects remain after a selection step."""


class NumericalError(LandmarkingError, ArithmeticError):
    """A linear-algebra step failed (for instance a non positive-definite matrix)."""

    def __init__(self, message: str, subject_id: str | None = None):
        super().__init__(message)
        self.subject_id = subject_id


class ConvergenceError(LandmarkingError):
    """An iterative optimizer did not reach its convergence criterion."""

    def __init__(self, message: str, last_iterate=None, diagnostics: dict | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.diagnostics = diagnostics or {}


class ConfigError(LandmarkingError, ValueError):
    """Run configuration is invalid; ``violations`` lists every failed constraint."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)
