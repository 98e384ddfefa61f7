"""Exception types shared across the package."""


class CSADError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CSADError, ValueError):
    """Operands have incompatible shapes."""


class ParameterError(CSADError, ValueError):
    """A scalar parameter is outside its valid range."""


class NumericError(CSADError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(CSADError, ValueError):
    """A configuration document is malformed or violates the schema."""


class DataError(CSADError, OSError):
    """A dataset, checkpoint or tensor file is missing or corrupt."""
