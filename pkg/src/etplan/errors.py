"""Exception taxonomy shared across the package.

Every error raised on purpose derives from :class:`EtplanError`, so the CLI
can map failures to exit codes without string matching.
"""
from __future__ import annotations


class EtplanError(Exception):
    """Base class for all errors raised by this package."""


class InputError(EtplanError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class ScenarioError(InputError):
    """A scenario file or scenario object failed validation."""


class FileFormatError(EtplanError, ValueError):
    """A file exists but could not be parsed (malformed JSON, bad layout)."""


class NumericalError(EtplanError, RuntimeError):
    """A computation hit a numerically unusable matrix (singular, indefinite)."""


class ConvergenceError(NumericalError):
    """An iterative routine exhausted its iteration budget."""


class CalibrationError(EtplanError, RuntimeError):
    """Region calibration could not collect enough data."""


class InfeasibleQueryError(EtplanError, ValueError):
    """A Pareto-front query asked for a point outside the achievable set.

    ``achievable`` carries the closest attainable bound so callers can report
    what *is* possible.
    """

    def __init__(self, message: str, achievable: float | None = None):
        super().__init__(message)
        self.achievable = achievable


class InternalError(EtplanError, RuntimeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
