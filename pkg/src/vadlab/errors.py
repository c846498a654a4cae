"""Exception types carrying the CLI exit code they map to."""


class VadlabError(Exception):
    exit_code = 1


class ConfigError(VadlabError, ValueError):
    exit_code = 1


class DataError(VadlabError, ValueError):
    exit_code = 2


class NumericalError(VadlabError, ArithmeticError):
    """Raised when a training loss goes non-finite."""

    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
