"""Exception types shared across the package (the CLI maps them to exit codes)."""


class ConfigError(ValueError):
    """Invalid configuration or argument values."""


class InputFormatError(ValueError):
    """A data file exists but cannot be parsed."""


class NumericError(ArithmeticError):
    """Non-finite loss or gradient encountered during training."""
