"""Exception types shared across the package."""


class ContiLoraError(Exception):
    """Base class for package errors."""


class DimensionError(ContiLoraError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ContiLoraError, ValueError):
    """A matrix contains NaN or infinite entries."""


class UndefinedInputError(ContiLoraError, ValueError):
    """An operation is undefined on the given input (e.g. zero norm)."""


class ConvergenceError(ContiLoraError, ArithmeticError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class TrainingDivergence(ContiLoraError, ArithmeticError):
    """The training loss became non-finite."""


class ConfigError(ContiLoraError, ValueError):
    """Invalid experiment or training configuration."""
