"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` used by the command-line entry point.
"""


class PCMError(Exception):
    exit_code = 1


class InvalidArgumentError(PCMError, ValueError):
    exit_code = 2


class ConfigError(PCMError, ValueError):
    exit_code = 3


class ShapeError(PCMError, ValueError):
    exit_code = 3


class FormatError(PCMError):
    """Malformed on-disk artifact; ``offset`` is the byte where parsing failed."""

    exit_code = 4

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(PCMError, ArithmeticError):
    exit_code = 5


class TokenizerError(PCMError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class InvariantError(PCMError, ValueError):
    exit_code = 5
