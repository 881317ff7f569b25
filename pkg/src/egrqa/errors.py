"""Exception types shared across the package."""

from __future__ import annotations


class EgrError(Exception):
    """Base class for all errors raised by egrqa."""


class IngestError(EgrError):
    pass


class ContractError(EgrError):
    """A caller violated a documented precondition."""


class IndexFormatError(EgrError):
    pass


class BackendError(EgrError):
    """A remote backend failed after exhausting its retries."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0) -> None:
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class EmptyResponseError(BackendError):
    pass


class ScriptMismatchError(EgrError):
    """The scripted mock received a prompt it was not told to expect."""


class DatasetError(EgrError):
    pass


class StageError(EgrError):
    pass
