"""Exception types raised across the package."""


class GDKLError(Exception):
    pass


class NotPositiveDefinite(GDKLError, ArithmeticError):
    pass


class DimensionMismatch(GDKLError, ValueError):
    pass


class DomainError(GDKLError, ValueError):
    pass


class NonPositiveVariance(GDKLError, ValueError):
    pass


class InvalidArchitecture(GDKLError, ValueError):
    pass


class NoRecordedForward(GDKLError, RuntimeError):
    pass


class LengthMismatch(GDKLError, ValueError):
    pass


class TooFewPoints(GDKLError, ValueError):
    pass


class DegenerateFeatures(GDKLError, ValueError):
    pass


class InvalidLabel(GDKLError, ValueError):
    pass


class ParseError(GDKLError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NonFinite(GDKLError, ValueError):
    pass


class ConfigError(GDKLError, ValueError):
    pass


class NumericalFailure(GDKLError, ArithmeticError):
    """Training produced a non-finite loss or parameter."""
