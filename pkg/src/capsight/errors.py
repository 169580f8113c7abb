"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage, configuration, data and file
format problems exit 2; numerical failures (non-finite losses or
gradients) exit 3.
"""


class CapsightError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CapsightError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(CapsightError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(CapsightError):
    """Dataset, vocabulary, or token-sequence contents are invalid."""


class FormatError(CapsightError):
    """A file does not conform to its container format."""


class NumericsError(CapsightError):
    """A non-finite value appeared where a finite one is required."""
