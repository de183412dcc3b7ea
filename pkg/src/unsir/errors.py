"""Exception types raised across the package."""


class UnsirError(Exception):
    """Base class for package errors."""


class ShapeError(UnsirError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(UnsirError, RuntimeError):
    """A precondition of an operation was violated."""


class FrozenModelError(ContractError):
    """Attempt to mutate the parameters of a frozen model."""


class ZeroGlanceViolation(ContractError):
    """A forget-class sample reached an operation that must never see one."""


class FormatError(UnsirError, ValueError):
    """Malformed file contents (IDX, CIFAR binary, checkpoint)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(UnsirError, FloatingPointError):
    """A loss or objective became NaN or infinite."""


class ConfigError(UnsirError, ValueError):
    """Invalid experiment configuration or parameter value."""
