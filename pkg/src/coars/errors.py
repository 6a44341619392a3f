"""Exception hierarchy shared across the package.

The CLI maps each family onto an exit code: usage errors exit 1, data
errors exit 2, backend/transport errors exit 3.
"""

from __future__ import annotations


class CoarsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(CoarsError, ValueError):
    """A caller violated an operation's preconditions."""

    exit_code = 1


class DomainError(UsageError):
    """A value lies outside its domain (e.g. a score outside [0, 1])."""


class DataError(CoarsError):
    """Input data could not be parsed or validated."""

    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class BackendError(CoarsError):
    """A policy backend failed to produce a valid result."""

    exit_code = 3


class DecodeError(BackendError):
    """A token sequence or text completion did not decode into a message."""


class TransportError(BackendError):
    """The remote backend could not be reached or timed out."""

    def __init__(self, message: str, attempts: int = 1, retryable: bool = True):
        self.attempts = attempts
        self.retryable = retryable
        super().__init__(f"{message} (attempts={attempts})")


class ProtocolError(BackendError):
    """A request or response violated the wire protocol."""


class ProtocolViolation(CoarsError):
    """A policy produced a message that breaks the interaction protocol."""

    exit_code = 3

    def __init__(self, message: str, turn: int):
        self.turn = turn
        super().__init__(f"turn {turn}: {message}")


class EpisodeError(CoarsError):
    """An episode aborted; ``partial`` holds the turns completed so far."""

    exit_code = 3

    def __init__(self, message: str, partial=()):
        self.partial = tuple(partial)
        super().__init__(message)


class ReferenceConstructionError(BackendError):
    """A diagnostic reference could not be built for a turn."""


class DivergenceError(CoarsError):
    """Training produced non-finite parameters or losses."""

    exit_code = 2

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)
