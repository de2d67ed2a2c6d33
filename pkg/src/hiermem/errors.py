"""Exception hierarchy shared by every layer of the engine."""

from __future__ import annotations


class HierMemError(Exception):
    """Base class for all domain errors raised by the engine."""


class ConfigurationError(HierMemError):
    """Misconfiguration, e.g. an embedding whose dimension does not match the store."""


class DomainError(HierMemError, ValueError):
    """Mathematical precondition violated (zero vector, dimension mismatch, ...)."""


class NotFoundError(HierMemError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class InvariantError(HierMemError):
    """A structural invariant would be (or is) violated."""

    def __init__(self, invariant: str, detail: str = "", stage: str | None = None):
        self.invariant = invariant
        self.detail = detail
        self.stage = stage
        msg = f"invariant violated: {invariant}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SchemaVersionError(HierMemError):
    def __init__(self, found: object, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"unsupported schema_version {found!r} (supported: {supported})")


class CorruptStoreError(HierMemError):
    """A persisted store could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class TransportError(HierMemError):
    """A remote provider could not be reached after the allowed retry."""


class TemplateError(HierMemError, KeyError):
    def __init__(self, template: str, placeholder: str):
        self.template = template
        self.placeholder = placeholder
        super().__init__(placeholder)

    def __str__(self) -> str:
        return f"template {self.template!r} is missing binding for placeholder {self.placeholder!r}"


class StageError(HierMemError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")
