"""
Error hierarchy for XTransferCDR.

Every error belongs to one family, and each family carries the process
exit code that management commands report for it.
"""


class XTransferError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class ConfigurationError(XTransferError):
    """Invalid configuration, flags, or arguments."""

    exit_code = 2


class UsageError(ConfigurationError):
    """An operation was called outside its contract (e.g. backward on an eval trace)."""


class StorageError(XTransferError):
    """Unreadable or unwritable files and directories."""

    exit_code = 3


class NumericError(XTransferError):
    """NaN or infinite values produced during computation."""

    exit_code = 4


class DataError(XTransferError):
    """Data that does not satisfy the expected contents."""

    exit_code = 5


class ShapeError(DataError):
    """Array dimensions disagree with what an operation requires."""


class ParseError(DataError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    """A dataset header violates the schema (e.g. duplicate gene ids)."""


class FormatError(DataError):
    """A checkpoint directory is missing, corrupt, or inconsistent with its manifest."""


class UndefinedMetricError(DataError):
    """A metric is undefined for the given inputs (e.g. constant vectors)."""


class DomainError(DataError):
    """Inputs fall outside a function's domain (e.g. negative expression)."""
