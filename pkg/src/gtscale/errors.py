"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GTError(Exception):
    """Base class for all errors raised by gtscale."""


class ConfigError(GTError, ValueError):
    """Invalid configuration or parameter combination (CLI exit code 2)."""


class DataError(GTError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonFiniteError(DataError):
    """NaN or infinity reached a kernel input."""


class DivergenceError(GTError, RuntimeError):
    """Training produced a non-finite loss (CLI exit code 4)."""

    def __init__(self, message: str, epoch: int | None = None, dump_path: str | None = None):
        self.epoch = epoch
        self.dump_path = dump_path
        super().__init__(message)
