"""Exception types shared across the toolkit."""

from __future__ import annotations


class EvolalError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(EvolalError, ValueError):
    """Input data violates a declared schema (dimension, field, or range)."""


class ParseError(EvolalError, ValueError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class ConfigError(EvolalError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ConvergenceError(EvolalError, RuntimeError):
    """An iterative solver hit its iteration cap before meeting tolerance."""

    def __init__(self, message: str, primal_residual: float | None = None,
                 dual_residual: float | None = None):
        super().__init__(message)
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual


class ModelStateError(EvolalError, ValueError):
    """A model object is in a state that makes the request meaningless."""


class LeakageError(EvolalError, RuntimeError):
    """Train/test contamination detected in a cross-validation split."""


class ConditioningError(EvolalError, RuntimeError):
    """A linear system is too ill-conditioned to solve reliably."""


class DegenerateInputError(EvolalError, ValueError):
    """Input is formally valid but carries no usable signal."""
