"""Exception types shared across the package.

The CLI maps each class to a process exit code.
"""


class GCLError(Exception):
    exit_code = 1


class ConfigError(GCLError, ValueError):
    exit_code = 2


class DataValidationError(GCLError, ValueError):
    exit_code = 3

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class NumericalError(GCLError, FloatingPointError):
    exit_code = 4
