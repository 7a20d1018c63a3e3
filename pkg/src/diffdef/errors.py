"""Shared exception types."""


class DiffdefError(Exception):
    pass


class ShapeError(DiffdefError, ValueError):
    """Array or grid shapes do not line up."""


class DomainError(DiffdefError, ValueError):
    """A value lies outside the domain an operation is defined on."""


class ArgumentError(DiffdefError, ValueError):
    """An argument is malformed (empty list, bad enum string, ...)."""


class NumericError(DiffdefError, ArithmeticError):
    """A computation produced non-finite values.

    Training loops attach the last finite parameter snapshot as
    ``last_good`` so callers can still save a usable checkpoint.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FormatError(DiffdefError, ValueError):
    """A serialized file violates the format. ``offset`` is a byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    """The file is well formed but uses a feature this reader does not support."""
