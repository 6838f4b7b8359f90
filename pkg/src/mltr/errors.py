"""Exception types shared across the package."""


class MltrError(Exception):
    """Base class for package errors."""


class ShapeError(MltrError, ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(MltrError, RuntimeError):
    """A call-time precondition was violated (mode/dtype/scalar-ness)."""


class CapacityError(MltrError, RuntimeError):
    """A sequence exceeds the configured maximum length."""


class ConfigError(MltrError, ValueError):
    """Invalid configuration value or file."""


class FormatError(MltrError, ValueError):
    """Malformed on-disk data; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(MltrError, RuntimeError):
    """Dataset directory or manifest problem."""


class CheckpointError(MltrError, RuntimeError):
    """Unreadable, corrupt, or shape-incompatible checkpoint."""
