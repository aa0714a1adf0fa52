"""Exception hierarchy. Each class maps to one CLI exit code."""


class LdmlError(Exception):
    exit_code = 1


class ConfigError(LdmlError):
    """Bad or missing configuration values and flags."""

    exit_code = 2


class InputError(LdmlError, ValueError):
    """Malformed or degenerate input data."""

    exit_code = 3


class ContractError(InputError):
    """Shape or dimension mismatch between arguments."""


class DegeneratePrivilegedError(InputError):
    """Privileged features carry no distance information (all pairs coincide)."""


class NumericalError(LdmlError, ArithmeticError):
    exit_code = 4
