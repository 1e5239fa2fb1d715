"""Exception taxonomy shared across the engine.

The CLI maps these onto exit codes: usage problems exit 2, data/format/
numeric problems exit 3, verification failures exit 1.
"""


class CpfError(Exception):
    """Base class for all engine errors."""


class DimensionError(CpfError, ValueError):
    """Tensor shapes disagree with an operation's contract."""


class NumericError(CpfError, ArithmeticError):
    """A non-finite value was produced or consumed."""


class DataError(CpfError, ValueError):
    """Labels, splits, or file contents violate a data contract."""


class FormatError(CpfError, ValueError):
    """A binary file is malformed; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(CpfError, ValueError):
    """A configuration is infeasible or internally inconsistent."""
