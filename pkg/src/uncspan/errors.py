"""Exception hierarchy shared by every uncspan module."""


class UncspanError(Exception):
    """Base class for all errors raised by the package."""


class InputError(UncspanError, ValueError):
    """Rejected input: wrong dimension, empty batch, non-finite values."""


class ConfigError(UncspanError, ValueError):
    """Invalid configuration or loss-adapter payload."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class NumericalError(UncspanError, ArithmeticError):
    """Overflow or non-finite intermediate value."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingDiverged(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch):
        super().__init__(f"training diverged: non-finite loss at epoch {epoch}")
        self.epoch = epoch


class DomainError(UncspanError, ValueError):
    """Argument outside the mathematical domain of a closed-form result."""


class ParseError(UncspanError, ValueError):
    """Malformed file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path
