"""Exception taxonomy shared across the package.

The CLI maps these to exit codes: configuration and contract problems
exit 2, numeric faults exit 3.
"""


class DimensionError(ValueError):
    """Tensor or array shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """A precondition was violated (non-scalar loss, fully masked row, ...)."""


class LengthError(ValueError):
    """A sequence does not fit the configured fixed length."""


class ConfigError(ValueError):
    """Invalid configuration, policy, or missing prerequisite artifact."""


class CheckpointError(ValueError):
    """Checkpoint archives are malformed or incompatible."""


class NumericFault(ArithmeticError):
    """A NaN appeared in a forward or backward computation."""
