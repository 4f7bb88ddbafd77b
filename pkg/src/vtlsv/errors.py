"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class VsvError(Exception):
    exit_code = 1


class ConfigError(VsvError):
    exit_code = 2


class DataError(VsvError, ValueError):
    exit_code = 3


class NumericError(VsvError, ArithmeticError):
    exit_code = 4
