"""Exception hierarchy shared by every module.

``ValidationError`` subclasses map to CLI exit code 1, ``NumericError``
subclasses to exit code 2.
"""


class ValidationError(ValueError):
    """Bad input: wrong shapes, malformed files, inconsistent configs."""


class ShapeError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class DuplicateTimestampError(SchemaError):
    pass


class ConfigConflictError(ValidationError):
    pass


class ChecksumError(ValidationError):
    pass


class FormatVersionError(ValidationError):
    pass


class ConstantChannelError(ValidationError):
    def __init__(self, channel):
        super().__init__(f"scaler: channel {channel!r} is constant on the training split (max == min)")
        self.channel = channel


class NumericError(ArithmeticError):
    """Runtime numeric failure (NaN/Inf, divergence)."""


class NonFiniteError(NumericError):
    pass


class GraphConsumedError(RuntimeError):
    """backward() called twice on the same computation record."""
