"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or configuration file violates its schema."""


class NumericError(RuntimeError):
    """A non-finite value appeared where training/inference requires finite math."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class CalibrationError(RuntimeError):
    """System sampling repeatedly produced a degenerate calibration run."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class ChecksumMismatchError(CheckpointError):
    """Payload bytes do not match the manifest checksum (or are truncated)."""


class FormatVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class ShapeMismatchError(CheckpointError):
    """A stored array does not match the shape declared in the manifest."""

    def __init__(self, name: str, message: str):
        super().__init__(f"array {name!r}: {message}")
        self.name = name


class CsvFormatError(ValueError):
    """A benchmark CSV file is malformed or missing a required column."""
