"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so ``cli.main`` can
translate failures without a lookup table.
"""


class MMILError(Exception):
    exit_code = 1


class ConfigurationError(MMILError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    """Tensor shapes that cannot be combined."""


class ContractError(MMILError, RuntimeError):
    """A caller broke an operation's precondition."""

    exit_code = 1


class DataError(MMILError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class MetricError(MMILError, ValueError):
    """Metric undefined for the given inputs (e.g. AUC with one class)."""

    exit_code = 3


class TrainingError(MMILError, RuntimeError):
    exit_code = 4
