"""Exception types shared across the package.

Each maps to a CLI exit code (see ``loupe.cli``).
"""


class LoupeError(Exception):
    exit_code = 3


class DimensionError(LoupeError, ValueError):
    """Array shapes do not line up."""


class NumericError(LoupeError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(LoupeError, RuntimeError):
    """A caller broke an operation's precondition."""


class GraphStateError(ContractError):
    """Backward requested on a graph that was already consumed."""


class ConfigError(LoupeError, ValueError):
    exit_code = 2


class CompatibilityError(ContractError):
    """Checkpoint and config/dataset disagree on array shapes."""
