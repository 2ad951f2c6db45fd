# errors.py
"""Exception hierarchy. Each family maps onto one CLI exit code (see app.EXIT_CODES)."""


class EvimilError(Exception):
    """Base class for every error raised on purpose by this project."""


class ConfigError(EvimilError):
    """Bad configuration key, value or command-line combination."""


class DataError(EvimilError):
    """Missing, truncated or inconsistent dataset / cache / checkpoint files."""


class NumericError(EvimilError):
    """Non-finite values or arguments outside a function's domain."""

    def __init__(self, message, epoch=None, bag_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.bag_index = bag_index


class ShapeError(EvimilError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(NumericError, ValueError):
    """Argument outside the mathematical domain (log of x <= 0, digamma of x <= 0, ...)."""
