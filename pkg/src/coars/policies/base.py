"""Policy backend contract shared by scripted, toy and remote policies."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Protocol, Sequence, runtime_checkable

import numpy as np

from ..domain import (
    Action,
    GenerationResult,
    ItemId,
    Memory,
    PeerOpinion,
    RecMessage,
    UserHistory,
)
from ..errors import UsageError

if TYPE_CHECKING:
    from ..distill import DiagnosticReference


class Role(str, enum.Enum):
    REC = "rec"
    USER = "user"


@dataclass(frozen=True)
class Context:
    """Everything a policy conditions on for a single generation.

    ``reference`` is only set in teacher mode. ``allowed_actions`` narrows
    the user's decision space and is used when asking a policy for the
    appropriate reaction while building a diagnostic reference.
    """

    role: Role
    history: UserHistory
    candidates: tuple[ItemId, ...] = ()
    rec_message: RecMessage | None = None
    memory: Memory = Memory()
    peer: PeerOpinion | None = None
    reference: "DiagnosticReference | None" = None
    turn_index: int = 1
    allowed_actions: tuple[Action, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.role is Role.REC and not self.candidates:
            raise UsageError("rec context requires a nonempty candidate set")
        if self.role is Role.USER and self.rec_message is None:
            raise UsageError("user context requires a recommendation message")
        if self.allowed_actions is not None:
            object.__setattr__(
                self, "allowed_actions", tuple(Action(a) for a in self.allowed_actions)
            )

    @property
    def is_teacher(self) -> bool:
        return self.reference is not None

    def with_reference(self, reference) -> "Context":
        return replace(self, reference=reference)


@runtime_checkable
class PolicyBackend(Protocol):
    """What the orchestrator and trainer need from a policy.

    ``generate`` samples with ``rng`` and decodes greedily when ``rng`` is
    None. ``logprob`` scores a given token sequence under ``ctx``.
    """

    thread_safe: bool

    def generate(self, ctx: Context, rng: np.random.Generator | None = None) -> GenerationResult:
        ...

    def logprob(self, ctx: Context, tokens: Sequence) -> list[float]:
        ...


def rec_context_for(turn, **changes) -> Context:
    """Rebuild the student rec context a completed turn was generated from."""
    ctx = Context(
        Role.REC,
        turn.history,
        candidates=turn.candidates,
        memory=turn.memory_before,
        turn_index=turn.turn_index,
    )
    return replace(ctx, **changes) if changes else ctx


def user_context_for(turn, **changes) -> Context:
    """Rebuild the student user context a completed turn was generated from."""
    ctx = Context(
        Role.USER,
        turn.history,
        candidates=turn.candidates,
        rec_message=turn.rec,
        memory=turn.memory_before,
        peer=turn.peer,
        turn_index=turn.turn_index,
    )
    return replace(ctx, **changes) if changes else ctx
