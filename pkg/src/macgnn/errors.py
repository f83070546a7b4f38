class MacGNNError(Exception):
    """Base class for errors raised by this package."""


class DataError(MacGNNError, ValueError):
    """Malformed or inconsistent input data."""


class DuplicateEdgeError(DataError):
    """A positive edge that already exists was submitted as new."""


class NumericError(MacGNNError, FloatingPointError):
    """Non-finite loss or parameters during training."""
