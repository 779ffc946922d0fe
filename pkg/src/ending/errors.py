"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, InvariantViolation -> 3,
anything else -> 1.
"""


class EndingError(Exception):
    pass


class ConfigError(EndingError):
    """Bad user-facing configuration (malformed split codes, schema violations)."""


class MalformedSplitError(ConfigError):
    pass


class DataError(EndingError):
    """Corrupt or inconsistent data on disk or in memory."""


class ShapeError(EndingError):
    """Tensor shapes violate an operation's contract."""


class ProposalFormatError(DataError):
    """Malformed proposal file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericError(EndingError):
    """NaN or non-finite values where finite numbers are required."""


class InvariantViolation(EndingError):
    """A runtime contract was broken (e.g. frozen parameter drift)."""


class FrozenDriftError(InvariantViolation):
    pass
