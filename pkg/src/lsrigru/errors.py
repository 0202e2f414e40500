"""Exception types shared across the package."""


class LsrigruError(Exception):
    """Base class for errors raised by this package."""


class ParseError(LsrigruError):
    """A file could not be parsed (carries the offending row where known)."""


class DataError(LsrigruError):
    """Input data violates a structural requirement (duplicates, gaps, ragged windows)."""


class ValidationError(LsrigruError):
    """A value is outside its legal domain (non-positive price, broken OHLC ordering)."""


class ArgumentError(LsrigruError):
    """A caller-supplied argument is invalid."""


class ConfigurationError(LsrigruError):
    """Model or layer configuration is inconsistent (shape/dimension mismatches)."""


class NumericError(LsrigruError):
    """A computation produced non-finite values."""
