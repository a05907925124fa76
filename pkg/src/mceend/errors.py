"""Exception types shared across the package and mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Missing or malformed input data (CLI exit code 3)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 4)."""
