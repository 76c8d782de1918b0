"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class ConvLunaError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(ConvLunaError, ValueError):
    """Inconsistent shapes, hyperparameters or configuration files."""

    exit_code = 3


class InputError(ConvLunaError, ValueError):
    """Bad data: out-of-range token IDs, malformed dataset lines, bad targets."""

    exit_code = 4


class NumericError(ConvLunaError, ArithmeticError):
    """Non-finite values encountered (NaN inputs, diverging loss)."""

    exit_code = 5


class UsageError(ConvLunaError, RuntimeError):
    """API misuse: non-scalar backward, missing gradients, ragged comparisons."""

    exit_code = 2
