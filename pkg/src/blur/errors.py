"""Exception types raised across the package."""


class BlurError(Exception):
    """Base class for all package errors."""


class ValidationError(BlurError, ValueError):
    """A value violates a documented invariant (non-finite, wrong shape, ...)."""


class LayoutError(BlurError, ValueError):
    """A flat genome vector does not match its layout."""


class UnsupportedStateCountError(BlurError, ValueError):
    pass


class ConfigurationError(BlurError, ValueError):
    """Inconsistent architecture / task / genome combination."""


class NumericOverflowError(BlurError, ArithmeticError):
    """A kernel produced NaN or Inf."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DataError(BlurError):
    """Base class for dataset ingestion failures."""


class IdxFormatError(DataError):
    """Bad magic number or malformed IDX header."""


class IdxTruncatedError(DataError):
    """IDX payload shorter than its header promises."""


class IdxCountMismatchError(DataError):
    """Image and label files disagree on the number of samples."""
