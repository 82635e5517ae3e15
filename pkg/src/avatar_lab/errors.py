"""Error categories shared by the library and the CLI exit-code contract."""

from __future__ import annotations

EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_IO = 66
EXIT_NUMERIC = 70


class ConfigError(ValueError):
    """Bad config file, bad flag value, or incompatible checkpoint configs."""

    exit_code = EXIT_CONFIG


class NumericError(ArithmeticError):
    """Non-finite values or numerically invalid inputs discovered mid-run."""

    exit_code = EXIT_NUMERIC
