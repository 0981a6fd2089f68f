"""
Exception hierarchy for the HPRN pipeline.

Every error raised on purpose by the package derives from HPRNError so the
command-line entry point can map it to an exit code.
"""

from typing import Any, Dict, Optional


class HPRNError(Exception):
    """Base class for all pipeline errors."""


class DimensionError(HPRNError, ValueError):
    """Tensor shapes or axes do not fit the operation."""


class ContractError(HPRNError, ValueError):
    """A documented precondition of an operation was violated."""


class CubeFormatError(HPRNError):
    """An HSC1 cube file could not be parsed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(HPRNError):
    """A parameter checkpoint is unreadable or does not match the model."""

    def __init__(self, message: str, parameter: Optional[str] = None, io_problem: bool = False):
        super().__init__(message)
        self.parameter = parameter
        self.io_problem = io_problem


class UndefinedMetricError(HPRNError):
    """A metric has no defined value for the given inputs."""


class NonFiniteLossError(HPRNError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
