"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class HeadScaleError(Exception):
    exit_code = 3


class UsageError(HeadScaleError):
    """Bad flag, bad config value, or an out-of-domain parameter."""

    exit_code = 1


class ConfigError(UsageError):
    pass


class ParameterError(UsageError, ValueError):
    pass


class DataError(HeadScaleError):
    """Input data does not satisfy an operation's precondition."""

    exit_code = 2


class TokenIndexError(DataError, IndexError):
    pass


class ContractError(HeadScaleError):
    """A postcondition or invariant was violated at runtime."""

    exit_code = 3


class DimensionError(ContractError, ValueError):
    pass


class NonFiniteError(ContractError, FloatingPointError):
    pass
