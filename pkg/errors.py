r"""
Exception hierarchy shared by all modules.

Every error belongs to one of three categories, and the command line maps
each category to an exit code:

- ConfigError    -> 2
- DataError      -> 3
- NumericalError -> 4
"""


class LobRelaxError(Exception):
    """Base class for every error raised by this project"""

    exit_code = 1


class ConfigError(LobRelaxError):
    """Inconsistent or unparseable configuration"""

    exit_code = 2


class DataError(LobRelaxError):
    """Input data or book state that violates a precondition"""

    exit_code = 3


class NumericalError(LobRelaxError):
    """A computation left its valid regime"""

    exit_code = 4
