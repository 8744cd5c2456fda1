"""Exception types raised across the package."""


class DGBenchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DGBenchError, ValueError):
    """Invalid configuration, role assignment or parameter combination."""


class SchemaError(DGBenchError, ValueError):
    """Feature schemas disagree between environments or batches."""


class DataError(DGBenchError, ValueError):
    """Data is missing or too small for the requested operation."""


class RangeError(ConfigurationError):
    """A parameter lies outside its legal range."""


class UnsupportedModeError(DGBenchError, ValueError):
    """The operation does not support the dataset's label mode."""


class InfeasibilityError(DGBenchError, ValueError):
    """A subsampling target cannot be reached from the available data."""


class UndefinedMetricError(DGBenchError, ValueError):
    """A metric is undefined for the given input (e.g. a single class)."""


class NumericError(DGBenchError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class FeatureTypeError(DGBenchError, TypeError):
    """A feature of the wrong kind (categorical vs continuous) was named."""
