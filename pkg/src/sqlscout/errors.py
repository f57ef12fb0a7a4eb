"""Exception types shared across the package."""


class SqlScoutError(Exception):
    """Base class for all package errors."""


class MalformedRecordError(SqlScoutError):
    """A question record is missing a required field."""

    def __init__(self, field: str):
        super().__init__(f"malformed question record: missing field {field!r}")
        self.field = field


class AttachError(SqlScoutError):
    """A database file could not be attached."""


class ExecutionError(SqlScoutError):
    """A query could not be executed for evaluation (error, timeout, or ceiling)."""


class IngestError(SqlScoutError):
    """A benchmark layout could not be ingested."""


class ConfigError(SqlScoutError):
    """A configuration problem that must be fixed before running."""


class TraceExistsError(SqlScoutError):
    """A trace for this (run, question, agent kind) is already stored."""
