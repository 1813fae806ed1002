"""Exception types shared across the package."""


class McdsegError(Exception):
    """Base class for all package errors."""


class ShapeError(McdsegError, ValueError):
    """Incompatible tensor or image extents."""


class DataError(McdsegError, ValueError):
    """Malformed, missing or inconsistent input data."""


class CheckpointError(DataError):
    """Checkpoint file is truncated, corrupt or of an unknown version."""


class NumericError(McdsegError, ArithmeticError):
    """A NaN or Inf appeared, or training diverged."""


class TapeError(McdsegError, RuntimeError):
    """Misuse of the gradient tape (e.g. backward without a forward pass)."""
