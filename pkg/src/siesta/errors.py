"""Exception types. Each carries the CLI exit code for its category."""


class SiestaError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(SiestaError, ValueError):
    exit_code = 2
    category = "config"


class UsageError(SiestaError, RuntimeError):
    exit_code = 3
    category = "usage"


class DataError(SiestaError, ValueError):
    exit_code = 4
    category = "data"


class NumericError(SiestaError, FloatingPointError):
    exit_code = 5
    category = "numeric"
