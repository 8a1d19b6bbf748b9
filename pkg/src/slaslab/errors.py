"""Exception hierarchy shared by all slaslab modules."""

from __future__ import annotations


class SlasError(Exception):
    """Base class for every error raised by slaslab."""


class PreconditionError(SlasError, ValueError):
    """An operation was called outside its documented domain."""


class InputError(SlasError, ValueError):
    """Input data is malformed (non-finite values, wrong shapes, ...)."""


class ConfigError(SlasError, ValueError):
    """A configuration value is invalid."""


class DomainError(SlasError, ValueError):
    """A computation left the domain where it is defined."""


class DegenerateError(SlasError, ArithmeticError):
    """A denominator, metric or density is degenerate."""


class ConvergenceError(SlasError, RuntimeError):
    """An iterative method did not converge.

    ``residual`` and ``last`` carry the final state so callers can
    inspect how far off the iteration was.
    """

    def __init__(self, message: str, residual: float | None = None, last=None):
        super().__init__(message)
        self.residual = residual
        self.last = last


class NumericalError(SlasError, FloatingPointError):
    """A training quantity became NaN or infinite.

    ``record`` is a dict describing the iteration at which it happened.
    """

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}
