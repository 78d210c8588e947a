"""Exception hierarchy shared by every module."""


class SegStitchError(Exception):
    pass


class DimensionError(SegStitchError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(SegStitchError, ValueError):
    """A configuration value violates a documented invariant."""


class UsageError(SegStitchError, RuntimeError):
    """An API was called in a state it does not support."""


class FormatError(SegStitchError, ValueError):
    """A file header names something this reader does not understand."""


class CorruptFileError(SegStitchError, ValueError):
    """File header and payload disagree."""


class ValidationError(SegStitchError, ValueError):
    """Decoded content is out of its declared range."""


class NonFiniteError(SegStitchError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""
