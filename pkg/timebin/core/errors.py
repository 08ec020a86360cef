"""Exception hierarchy shared by the core modules, services and CLI."""
from __future__ import annotations

from typing import Optional


class TimebinError(Exception):
    """Base class for all domain errors; ``exit_code`` drives the CLI status."""

    exit_code = 2


class ConfigError(TimebinError, ValueError):
    """Invalid scenario, discretization or command-line configuration."""

    exit_code = 1


class TagFormatError(TimebinError, ValueError):
    """A tag file record could not be parsed."""

    def __init__(self, message: str, offset: int, offset_kind: str = "byte") -> None:
        super().__init__(f"{message} (at {offset_kind} {offset})")
        self.offset = offset
        self.offset_kind = offset_kind


class OrderingError(TimebinError, ValueError):
    """Tags are not strictly ordered by (timestamp, channel)."""

    def __init__(self, message: str, index: Optional[int] = None) -> None:
        super().__init__(message)
        self.index = index


class StreamMismatchError(TimebinError, ValueError):
    """Streams that must share a party or epoch do not."""


class NoPeakError(TimebinError, ValueError):
    """A correlation histogram holds no counts to locate a peak in."""


class EntropyDomainError(TimebinError, ValueError):
    """Probability argument outside [0, 1]."""


class SyncFailure(TimebinError, RuntimeError):
    """Clock tracking could not lock onto enough blocks."""

    exit_code = 3


class StageError(TimebinError):
    """A pipeline stage failed; wraps the original error with the stage name."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)


__all__ = [
    "ConfigError",
    "EntropyDomainError",
    "NoPeakError",
    "OrderingError",
    "StageError",
    "StreamMismatchError",
    "SyncFailure",
    "TagFormatError",
    "TimebinError",
]
