"""Exception types shared across the engine."""


class StackNetError(Exception):
    """Base class for all engine errors."""


class DimensionError(StackNetError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(StackNetError, ValueError):
    """A configuration value violates its contract."""


class StateError(StackNetError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DegenerateInputError(StackNetError, ValueError):
    """Input data has no usable variation (zero variance, empty mask, ...)."""


class UndefinedMetricError(StackNetError, ValueError):
    """A metric is mathematically undefined for the given masks."""


class CapacityError(StackNetError, ValueError):
    """Requested structures do not fit into the available region."""


class ParseError(StackNetError, ValueError):
    """Malformed volume file.

    Parameters
    ----------
    field : str
        Name of the offending header field.
    offset : int
        Byte offset of that field in the file.
    """

    def __init__(self, field, offset, message=""):
        self.field = field
        self.offset = offset
        text = f"{field} (byte offset {offset})"
        if message:
            text = f"{text}: {message}"
        super().__init__(text)
