"""Exception hierarchy.

Every error carries the CLI exit code of its class: 1 usage, 2 config,
3 data, 4 backend.
"""

from __future__ import annotations


class SurgforgeError(Exception):
    exit_code = 1


class ConfigError(SurgforgeError):
    exit_code = 2


class DataError(SurgforgeError):
    exit_code = 3


class SchemaError(DataError, ValueError):
    """Malformed record or model output.

    ``line`` is 1-based when the error comes from a JSONL file.
    """

    def __init__(self, reason: str, line: int | None = None, field: str | None = None):
        self.reason = reason
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {reason}" if where else reason)


class ParseError(DataError, ValueError):
    def __init__(self, reason: str, line: int, column: int):
        self.reason = reason
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {reason}")


class InvalidConversation(DataError, ValueError):
    pass


class ValidationError(DataError, ValueError):
    def __init__(self, record_id: str, reason: str):
        self.record_id = record_id
        super().__init__(f"{record_id}: {reason}")


class DuplicateIdError(DataError, ValueError):
    pass


class MissingInputError(DataError, FileNotFoundError):
    pass


class EmptyCatalogError(DataError, ValueError):
    pass


class EmptyVideoError(DataError, ValueError):
    pass


class PolicyError(DataError, ValueError):
    pass


class OrderError(DataError, ValueError):
    pass


class JoinError(DataError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class RangeError(SchemaError):
    pass


class MismatchError(SchemaError):
    pass


class EmptyInputError(DataError, ValueError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass


class EmptyConversationError(DataError, ValueError):
    pass


class UnresolvedClipError(DataError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class BackendError(SurgforgeError):
    """Non-retryable or exhausted backend failure."""

    exit_code = 4

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        self.status = status
        self.body = body
        super().__init__(message)


class TransportError(BackendError):
    pass


class RateLimitExhausted(BackendError):
    pass


class AuthError(BackendError):
    pass


class MissingFixtureError(BackendError):
    pass
