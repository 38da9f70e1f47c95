"""Exception types shared across the package."""


class ScatgenError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ScatgenError, ValueError):
    pass


class DimensionMismatchError(ScatgenError, ValueError):
    pass


class LayoutMismatchError(ScatgenError, ValueError):
    pass


class InsufficientSamplesError(ScatgenError, ValueError):
    pass


class DimensionTooLargeError(ScatgenError, ValueError):
    pass


class ShapeMismatchError(ScatgenError, ValueError):
    pass


class NonFiniteError(ScatgenError, FloatingPointError):
    """Raised when a loss or gradient stops being finite.

    The message carries the context (parameter block, epoch, step).
    """


class FormatError(ScatgenError, IOError):
    """Unreadable or unsupported file."""


class VersionMismatchError(FormatError):
    pass


class ChecksumMismatchError(FormatError):
    pass


class IncompatibleArtifactsError(ScatgenError, ValueError):
    """Checkpoint, whitening and images disagree on a dimension."""
