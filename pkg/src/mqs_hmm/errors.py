"""Exception hierarchy shared by all solver layers."""

from __future__ import annotations


class MqsError(Exception):
    """Base class for all package errors."""


class GeometryError(MqsError):
    pass


class MaterialError(MqsError):
    """Local constitutive inversion failed.

    ``residual`` carries the largest residual norm over the failing points.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class SolverError(MqsError):
    """A linear or nonlinear solve did not succeed."""

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = list(history or [])


class CellError(SolverError):
    pass


class ConfigError(MqsError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProbeError(MqsError):
    pass


class UndefinedErrorMetric(MqsError):
    """Raised when a relative error has a zero reference norm."""
