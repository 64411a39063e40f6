"""
Error types raised across the toolkit.
"""

from typing import Optional


class BoundsError(ValueError):
    """Base class for every library error."""


class StructuralError(BoundsError):
    """Malformed neighborhood data, shapes, labels or graphs."""


class CapabilityError(BoundsError):
    """Operation needs something the input does not provide."""


class DegeneracyError(BoundsError):
    """A variance that must be positive is not."""


class RangeError(BoundsError):
    """Numeric parameter outside its admissible range."""


class UsageError(BoundsError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
