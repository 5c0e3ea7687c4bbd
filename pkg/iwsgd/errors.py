"""
Exception types raised by the IWSGD engine.
"""

from typing import Any, Optional, Sequence, Tuple


class IWSGDError(Exception):
    """Base class for all engine errors."""


class DimensionError(IWSGDError, ValueError):
    """Raised when tensor shapes do not line up."""

    def __init__(self, message: str, shapes: Sequence[Tuple[int, ...]] = (), layer_index: Optional[int] = None):
        self.shapes = tuple(tuple(s) for s in shapes)
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class DegenerateLikelihoodError(IWSGDError):
    """Raised when every sample of an example has zero probability."""

    def __init__(
        self,
        message: str,
        log_liks: Sequence[float] = (),
        example_index: Optional[int] = None,
        step: Optional[int] = None
    ):
        self.log_liks = list(log_liks)
        self.example_index = example_index
        self.step = step
        details = []
        if step is not None:
            details.append(f"step={step}")
        if example_index is not None:
            details.append(f"example={example_index}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class CapacityError(IWSGDError):
    """Raised when an exact enumeration would exceed its configured limit."""

    def __init__(self, message: str, required: int = 0, limit: int = 0):
        self.required = required
        self.limit = limit
        super().__init__(message)


class UnsupportedModeError(IWSGDError):
    """Raised when an operation does not support the requested noise mode."""


class BudgetExhaustedError(IWSGDError):
    """Raised when a training step would overrun the compute budget."""


class LabelRangeError(IWSGDError, ValueError):
    """A dataset label is not a valid class index."""

    def __init__(self, message: str, num_classes: Optional[int] = None):
        self.num_classes = num_classes
        super().__init__(message)


class ConfigError(IWSGDError):
    """Raised for malformed or invalid experiment configuration."""

    def __init__(self, message: str, key: Optional[str] = None, value: Any = None):
        self.key = key
        self.value = value
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class IdxFormatError(IWSGDError):
    """Base class for IDX parsing failures."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class IdxMagicError(IdxFormatError):
    """Unexpected magic number at the start of an IDX file."""


class IdxTruncatedError(IdxFormatError):
    """IDX file ends before the declared number of records."""


class IdxCountMismatchError(IdxFormatError):
    """Image and label files declare different record counts."""
