"""Exception hierarchy shared by every module."""


class DGSTMTLError(Exception):
    """Base class for all package errors."""


class DimensionError(DGSTMTLError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DGSTMTLError, ValueError):
    """A configuration is invalid before any compute happens."""


class InputError(DGSTMTLError, ValueError):
    """Caller-supplied data is out of range or malformed."""


class LoadError(DGSTMTLError):
    """A data or checkpoint file could not be read."""


class NumericError(DGSTMTLError, FloatingPointError):
    """A loss or gradient became non-finite."""
