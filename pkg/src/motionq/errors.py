"""Exception hierarchy shared across the package."""


class MotionQError(Exception):
    pass


class DimensionError(MotionQError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(MotionQError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigurationError(MotionQError, ValueError):
    """Model, V2X, or run configuration is invalid or inconsistent."""


class FormatError(MotionQError):
    """Base class for on-disk / wire format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class MissingTensorError(FormatError):
    pass
