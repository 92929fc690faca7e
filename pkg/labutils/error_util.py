from typing import Any, Dict, List, Optional


class LabError(Exception):
    """Base class for every error raised by the laboratory."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details: Dict[str, Any] = dict(details or {})


class ParameterError(LabError, ValueError):
    """An argument is out of range or a precondition does not hold."""


class GeometryError(LabError):
    """The discrete geometry cannot represent the requested object."""


class SolverError(LabError):
    """A linear solve did not reach the requested tolerance."""

    def __init__(
        self,
        message: str,
        method: str,
        residuals: Optional[List[float]] = None,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message, details)
        self.method = method
        self.residuals: List[float] = list(residuals or [])
        self.details.setdefault("method", method)
        self.details.setdefault("residuals", self.residuals[-20:])


class ConfigError(LabError):
    """A scenario file does not parse or does not validate."""
