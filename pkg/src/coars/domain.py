"""Core value types of the RecAgent/UserAgent interaction protocol.

All records are frozen dataclasses so they can be shared freely between
worker threads. Identifiers are plain strings at this layer; dense integer
ids only appear inside the recommender and the toy policies.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NewType, Sequence

from .errors import DomainError

UserId = NewType("UserId", str)
ItemId = NewType("ItemId", str)


class Action(str, enum.Enum):
    CLICK = "click"
    STAR = "star"
    SKIP = "skip"
    DISLIKE = "dislike"


class TerminatedBy(str, enum.Enum):
    CLICK = "click"
    MAX_TURNS_FALLBACK = "max_turns_fallback"


# (low, high, low_inclusive); every upper bound is inclusive.
ACTION_INTERVALS: dict[Action, tuple[float, float, bool]] = {
    Action.CLICK: (0.8, 1.0, False),
    Action.STAR: (0.5, 0.8, False),
    Action.SKIP: (0.3, 0.5, False),
    Action.DISLIKE: (0.0, 0.3, True),
}

ACCEPT_ACTIONS = (Action.CLICK, Action.STAR)
REJECT_ACTIONS = (Action.SKIP, Action.DISLIKE)


def _check_unit(s: float) -> None:
    if not (isinstance(s, (int, float)) and math.isfinite(s) and 0.0 <= s <= 1.0):
        raise DomainError(f"score {s!r} outside [0, 1]")


def score_to_action(s: float) -> Action:
    """Map an acceptance score onto the action whose interval contains it.

    Raises
    ------
    DomainError
        If ``s`` is not a finite number in [0, 1].
    """
    _check_unit(s)
    if s > 0.8:
        return Action.CLICK
    if s > 0.5:
        return Action.STAR
    if s > 0.3:
        return Action.SKIP
    return Action.DISLIKE


def in_interval(action: Action, s: float) -> bool:
    lo, hi, lo_inclusive = ACTION_INTERVALS[Action(action)]
    above = s >= lo if lo_inclusive else s > lo
    return above and s <= hi


def format_interval(action: Action) -> str:
    lo, hi, lo_inclusive = ACTION_INTERVALS[Action(action)]
    return f"{'[' if lo_inclusive else '('}{lo:g},{hi:.1f}]"


def is_accept(a: Action) -> bool:
    return Action(a) in ACCEPT_ACTIONS


@dataclass(frozen=True)
class UserHistory:
    user: UserId
    events: tuple[tuple[ItemId, int], ...] = ()

    def __post_init__(self):
        if not self.user:
            raise DomainError("user id must be nonempty")
        events = tuple((ItemId(i), int(ts)) for i, ts in self.events)
        if any(events[k][1] > events[k + 1][1] for k in range(len(events) - 1)):
            raise DomainError(f"history of {self.user} is not sorted by timestamp")
        object.__setattr__(self, "events", events)

    @property
    def items(self) -> tuple[ItemId, ...]:
        return tuple(i for i, _ in self.events)


@dataclass(frozen=True)
class RecMessage:
    item: ItemId
    rationale: str = ""


@dataclass(frozen=True)
class UserMessage:
    action: Action
    score: float
    rationale: str = ""

    def __post_init__(self):
        object.__setattr__(self, "action", Action(self.action))


@dataclass(frozen=True)
class PeerOpinion:
    peer: UserId | None
    item: ItemId
    text: str = ""
    similarity: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.similarity):
            raise DomainError("peer similarity must be finite")


def validate_user_message(m: UserMessage) -> list[str]:
    """Return the list of interval violations of ``m`` (empty when valid)."""
    violations = []
    s = m.score
    if not (isinstance(s, (int, float)) and math.isfinite(s) and 0.0 <= s <= 1.0):
        violations.append(f"score {s!r} outside [0,1]")
    elif not in_interval(m.action, s):
        violations.append(
            f"score {s:g} outside {m.action.value} interval {format_interval(m.action)}"
        )
    return violations


@dataclass(frozen=True)
class Memory:
    records: tuple[tuple[RecMessage, UserMessage], ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: RecMessage, user: UserMessage) -> "Memory":
        return Memory(self.records + ((rec, user),))

    @property
    def recommended(self) -> tuple[ItemId, ...]:
        return tuple(r.item for r, _ in self.records)


@dataclass(frozen=True)
class GenerationResult:
    """One sampled completion: its tokens, their log-probabilities, and the
    decoded message."""

    tokens: tuple
    logps: tuple[float, ...]
    decoded: RecMessage | UserMessage

    def __post_init__(self):
        if len(self.tokens) != len(self.logps):
            raise DomainError("tokens and logps must have equal length")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "logps", tuple(float(x) for x in self.logps))


@dataclass(frozen=True)
class InteractionTurn:
    turn_index: int
    history: UserHistory
    candidates: tuple[ItemId, ...]
    memory_before: Memory
    rec: RecMessage
    user: UserMessage
    peer: PeerOpinion | None = None
    rec_generation: GenerationResult | None = field(default=None, compare=False, repr=False)
    user_generation: GenerationResult | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.turn_index < 1:
            raise DomainError("turn_index must be >= 1")
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.rec.item not in self.candidates:
            raise DomainError(
                f"turn {self.turn_index}: item {self.rec.item} not in candidate set"
            )

    @property
    def peer_similarity(self) -> float:
        return self.peer.similarity if self.peer is not None else 0.0


@dataclass(frozen=True)
class Trajectory:
    user: UserId
    turns: tuple[InteractionTurn, ...]
    final_item: ItemId
    terminated_by: TerminatedBy
    ground_truth: ItemId | None = None

    def __post_init__(self):
        turns = tuple(self.turns)
        object.__setattr__(self, "turns", turns)
        object.__setattr__(self, "terminated_by", TerminatedBy(self.terminated_by))
        if not turns:
            raise DomainError("trajectory must contain at least one turn")
        if [t.turn_index for t in turns] != list(range(1, len(turns) + 1)):
            raise DomainError("turn indices must be 1..T consecutive")
        if self.terminated_by is TerminatedBy.CLICK:
            last = turns[-1]
            if last.user.action is not Action.CLICK or last.rec.item != self.final_item:
                raise DomainError("click-terminated trajectory must end on a click")

    def __len__(self) -> int:
        return len(self.turns)


def memory_from_turns(turns: Sequence[InteractionTurn]) -> Memory:
    m = Memory()
    for t in turns:
        m = m.append(t.rec, t.user)
    return m
