"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RelhalluError(Exception):
    exit_code = 1


class ConfigError(RelhalluError, ValueError):
    exit_code = 1


class ShapeError(RelhalluError, ValueError):
    exit_code = 2


class DataError(RelhalluError, ValueError):
    """Ingestion or schema failure in an input file."""

    exit_code = 2


class ModelStateError(RelhalluError, RuntimeError):
    exit_code = 1


class NumericalError(RelhalluError, ArithmeticError):
    """Non-finite value encountered during training or evaluation."""

    exit_code = 3

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step
