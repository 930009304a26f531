from __future__ import annotations

from typing import Optional


class VoxatnError(Exception):
    """Base class for every error raised by the pipeline."""

    exit_code = 1


# --- user errors (bad input, bad config, bad data) ---


class ConfigError(VoxatnError, ValueError):
    pass


class ParseError(VoxatnError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ZeroExtentError(VoxatnError, ValueError):
    pass


class EmptyGridError(VoxatnError, ValueError):
    pass


class ShapeError(VoxatnError, ValueError):
    pass


class DatasetError(VoxatnError, ValueError):
    pass


class ProtocolError(VoxatnError, ValueError):
    pass


class CheckpointError(VoxatnError, ValueError):
    pass


# --- internal invariant violations ---


class InvariantError(VoxatnError, RuntimeError):
    exit_code = 2


class NonFiniteError(InvariantError):
    pass


class GradientCheckError(InvariantError):
    pass
