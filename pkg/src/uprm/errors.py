"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numerical/training failures exit 4.
"""


class UprmError(Exception):
    """Base class for all package-specific errors."""


class ContractError(UprmError, ValueError):
    """A caller violated an operation's precondition (bad lengths, NaNs, ...)."""


class DimensionError(ContractError):
    """Incompatible tensor shapes; the message names both shapes."""


class ConfigError(UprmError, ValueError):
    """Invalid configuration value, unknown key, or bad command setup."""


class DataError(UprmError, ValueError):
    """Malformed dataset content or file; messages carry line/frame context."""


class TrainingError(UprmError, RuntimeError):
    """Numerical failure during optimization (non-finite loss or gradient)."""
