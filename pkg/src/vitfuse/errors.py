"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ValueError):
    """A dataset sample or label file failed validation."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or inconsistent."""
