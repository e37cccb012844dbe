class WtalError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(WtalError, ValueError):
    pass


class ShapeError(WtalError, ValueError):
    pass


class EmptyVideoError(InvalidParameterError):
    pass


class DegenerateVideoError(InvalidParameterError):
    pass


class OracleError(WtalError, ArithmeticError):
    """A finite-difference probe produced a non-finite value."""


class NumericError(WtalError, ArithmeticError):
    pass


class FormatError(WtalError, ValueError):
    """Malformed on-disk file. ``offset`` is a byte offset or line number."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class ConfigError(WtalError, ValueError):
    pass
