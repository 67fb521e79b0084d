"""Exception types. The CLI maps each family to its own exit code."""


class NoisyNPError(Exception):
    pass


class ConfigError(NoisyNPError, ValueError):
    """Invalid configuration value, schema violation or inconsistent request."""


class NumericalError(NoisyNPError, ArithmeticError):
    """Factorization failure or non-finite values where finite ones are required."""


class TrainingError(NumericalError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message, *, step=None, name=None):
        super().__init__(message)
        self.step = step
        self.name = name


class CheckpointFormatError(NoisyNPError, IOError):
    """Unreadable, truncated or foreign checkpoint file."""
