from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_IO = 4
EXIT_INVARIANT = 5


class CondOptError(Exception):
    exit_code = 1


class ConfigError(CondOptError, ValueError):
    exit_code = EXIT_CONFIG


class DataError(CondOptError, ValueError):
    """Bad input data; ``row`` is the 1-based data row (header excluded)."""

    exit_code = EXIT_DATA

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None) -> None:
        self.row = row
        self.column = column
        prefix = ""
        if row is not None:
            prefix += f"row {row}: "
        if column is not None:
            prefix += f"column {column}: "
        super().__init__(prefix + message)


class ModelFormatError(CondOptError):
    exit_code = EXIT_IO


class InvariantError(CondOptError, RuntimeError):
    exit_code = EXIT_INVARIANT


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, CondOptError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    if isinstance(error, ValueError):
        return EXIT_CONFIG
    return EXIT_INVARIANT
