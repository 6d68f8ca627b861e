"""Exception types shared across the package."""


class ScnnError(Exception):
    """Base class for all package errors."""


class DomainError(ScnnError, ValueError):
    """Input value outside the mathematical domain of an operation."""


class UsageError(ScnnError, ValueError):
    """API called with inconsistent or invalid arguments."""


class SchemaError(UsageError):
    """A serialized artifact failed validation; message names the field."""


class CorruptTraceFileError(ScnnError):
    """Trace file is truncated, mislabeled, or internally inconsistent."""


class UndefinedCorrelationError(ScnnError):
    """Pearson correlation is undefined (zero variance on one side)."""
