"""Exception types shared across the package."""


class DwinError(Exception):
    """Base class for every error raised by dwinformer."""


class DimensionError(DwinError, ValueError):
    pass


class ConfigError(DwinError, ValueError):
    pass


class DTypeMismatchError(DwinError, TypeError):
    pass


class UsageError(DwinError, RuntimeError):
    pass


class NumericError(DwinError, FloatingPointError):
    pass


class DomainError(DwinError, ValueError):
    pass


class CheckpointError(DwinError, ValueError):
    pass


class FormatError(DwinError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
