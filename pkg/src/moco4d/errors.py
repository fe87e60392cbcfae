"""Shared exception types."""


class DimensionError(ValueError):
    """Shapes or extents incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite data is required."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration values."""


class FormatError(ValueError):
    """Malformed on-disk container or sidecar header."""


class TapeReplayError(RuntimeError):
    """Replaying a gradient tape did not reproduce the recorded forward values."""
