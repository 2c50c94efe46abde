"""Exception hierarchy shared by every module."""


class MicroDartsError(Exception):
    """Base class for all package errors."""


class StructuralError(MicroDartsError, ValueError):
    """Shapes, lengths or channel counts do not fit together."""


class NumericError(MicroDartsError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class StateError(MicroDartsError, RuntimeError):
    """An operation was called in the wrong order."""


class InputError(MicroDartsError, ValueError):
    """Malformed file, config or data."""


class DegenerateError(MicroDartsError, ValueError):
    """A vector is too close to zero for a projection to be defined."""


class OracleCapError(MicroDartsError):
    """Exhaustive enumeration would exceed the configured cap."""

    def __init__(self, count, cap):
        super().__init__(f"enumeration count {count} exceeds cap {cap}")
        self.count = count
        self.cap = cap
