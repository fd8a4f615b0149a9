"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 2, everything else to exit code 1.
"""


class FlowadError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowadError):
    """Invalid configuration, flags, or dimension wiring."""


class DimensionError(ConfigError):
    """Shape mismatch between operands."""


class ContractError(FlowadError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class FormatError(FlowadError):
    """Malformed or truncated binary/text artifact."""


class DataError(FlowadError):
    """Structurally valid file carrying invalid payload values."""


class ValidationError(FlowadError):
    """Manifest or dataset consistency violation."""


class TrainingError(FlowadError):
    """Non-finite loss or gradient during optimization."""


class NumericError(FlowadError):
    """Numerical failure (e.g. covariance factorization)."""
