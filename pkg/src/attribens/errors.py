"""Exception types shared across the package."""

__all__ = [
    "ShapeError",
    "MaskError",
    "NumericError",
    "ConfigError",
    "TrainingDivergence",
    "FormatError",
    "CorruptionError",
    "MigrationError",
    "SizeCapError",
]


class ShapeError(ValueError):
    """Tensor dimensions do not line up."""


class MaskError(ValueError):
    """A dropout mask does not match the model it is applied to."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or an unusable matrix."""


class ConfigError(ValueError):
    """Invalid or incompatible configuration (CLI exit code 2)."""


class TrainingDivergence(RuntimeError):
    """Training loss became non-finite; message names epoch and batch."""


class FormatError(ValueError):
    """A file does not match its declared binary format."""


class CorruptionError(FormatError):
    """Self-consistency check of a stored artifact failed."""


class MigrationError(FormatError):
    """Artifact was written by an unsupported format version."""


class SizeCapError(ValueError):
    """A brute-force oracle was asked to exceed its size cap."""
