"""
Exception hierarchy shared by the jem_lab modules.
"""

from typing import Any, Optional


class JemError(Exception):
    """Base class for every error raised by jem_lab."""


class DimensionError(JemError, ValueError):
    """Tensor shapes do not line up with what an operation expects."""


class UnsupportedOpError(JemError, TypeError):
    """An operation outside the differentiable primitive set was requested."""


class DivergenceError(JemError):
    """A sampler or training step produced non-finite or runaway energies."""


class TrainingFailedError(JemError):
    """Training gave up after exhausting its restarts."""

    def __init__(self, message: str, checkpoint: Optional[Any] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class ConfigError(JemError, ValueError):
    """Invalid or incomplete run configuration."""


class EmptyInputError(JemError, ValueError):
    """An operation received an empty collection where data is required."""


class DatasetParseError(JemError):
    """A dataset file could not be parsed."""


class MagicError(DatasetParseError):
    """Binary dataset file does not start with the expected magic bytes."""


class HeaderError(DatasetParseError):
    """CSV header is missing or malformed."""


class LabelRangeError(DatasetParseError):
    """A label lies outside [0, K)."""


class TruncatedFileError(DatasetParseError):
    """File ends before the declared payload."""


class CheckpointError(JemError):
    """Checkpoint file is corrupt, has the wrong magic, or an unknown version."""
