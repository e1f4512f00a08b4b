"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class UTNetError(Exception):
    exit_code = 1


class ConfigError(UTNetError, ValueError):
    exit_code = 2


class DataError(UTNetError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    """Operand shapes are incompatible."""


class ContractError(UTNetError, RuntimeError):
    """A caller broke an operation's precondition (e.g. backward on a non-scalar)."""


class VerificationError(UTNetError):
    exit_code = 4
