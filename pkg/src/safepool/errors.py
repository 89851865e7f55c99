"""Exception types shared across the library.

CLI exit-code mapping: ConfigError -> 2, DataError (and subclasses) -> 3.
"""


class SafepoolError(Exception):
    pass


class DimensionError(SafepoolError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(SafepoolError, ValueError):
    """Invalid configuration or parameter bounds."""


class DataError(SafepoolError):
    """A data file or dataset is missing, malformed, or insufficient."""


class TensorFormatError(DataError):
    """A tensor container file failed header or payload validation."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapacityError(DataError):
    """A class does not have enough samples for the requested split."""


class DegenerateFeatureError(SafepoolError, ValueError):
    """A feature vector with (near-)zero norm where a direction is required."""
