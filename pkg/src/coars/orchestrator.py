"""The multi-turn RecAgent/UserAgent episode loop."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .domain import (
    Action,
    InteractionTurn,
    ItemId,
    Memory,
    PeerOpinion,
    RecMessage,
    TerminatedBy,
    Trajectory,
    UserHistory,
    UserId,
    UserMessage,
    validate_user_message,
)
from .errors import EpisodeError, ProtocolViolation, UsageError
from .policies.base import Context, Role

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeConfig:
    max_turns: int = 3
    remove_recommended_from_candidates: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_turns < 1:
            raise UsageError("max_turns must be >= 1")


class PeerOpinionProvider(Protocol):
    def opinion(self, user: UserId, item: ItemId) -> PeerOpinion | None:
        ...


class NoPeers:
    """Provider for runs without collaborative evidence."""

    def opinion(self, user, item):
        return None


def update_memory(m: Memory, rec: RecMessage, user: UserMessage) -> Memory:
    return m.append(rec, user)


def finalize(turns: Sequence[InteractionTurn]) -> tuple[ItemId, TerminatedBy]:
    """Pick the episode's final item.

    A click selects its item. Otherwise the item with the highest acceptance
    score wins, the earliest turn breaking ties.
    """
    if not turns:
        raise UsageError("finalize needs at least one turn")
    for turn in turns:
        if turn.user.action is Action.CLICK:
            return turn.rec.item, TerminatedBy.CLICK
    best = turns[0]
    for turn in turns[1:]:
        if turn.user.score > best.user.score:
            best = turn
    return best.rec.item, TerminatedBy.MAX_TURNS_FALLBACK


def episode_rng(seed: int, user: UserId) -> np.random.Generator:
    """Per-episode generator, independent of the order episodes run in."""
    return np.random.default_rng([seed, zlib.crc32(str(user).encode("utf-8"))])


def run_episode(
    history: UserHistory,
    candidates: Iterable[ItemId],
    rec_policy,
    user_policy,
    peer_source: PeerOpinionProvider | None = None,
    cfg: EpisodeConfig = EpisodeConfig(),
    ground_truth: ItemId | None = None,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Run one user's episode until a click or ``cfg.max_turns`` turns.

    ``rng`` drives both policies; by default it is derived from ``cfg.seed``
    and the user id. Pass ``rng=False`` for greedy decoding.

    Raises
    ------
    ProtocolViolation
        If the recommender leaves the candidate set or a user message
        violates its action's score interval.
    EpisodeError
        If a backend fails; ``partial`` carries the completed turns.
    """
    pool = list(dict.fromkeys(candidates))
    if not pool:
        raise UsageError("candidate set must be nonempty")
    peer_source = peer_source or NoPeers()
    if rng is None:
        rng = episode_rng(cfg.seed, history.user)
    elif rng is False:
        rng = None
    memory = Memory()
    turns: list[InteractionTurn] = []
    for t in range(1, cfg.max_turns + 1):
        if not pool:
            break
        c_t = tuple(pool)
        try:
            rec_gen = rec_policy.generate(
                Context(Role.REC, history, candidates=c_t, memory=memory, turn_index=t), rng
            )
        except Exception as err:
            raise EpisodeError(f"{history.user} turn {t}: rec backend failed: {err}", turns) from err
        rec = rec_gen.decoded
        if not isinstance(rec, RecMessage) or rec.item not in c_t:
            raise ProtocolViolation(f"recommended item {getattr(rec, 'item', rec)!r} not in C_t", t)
        peer = peer_source.opinion(history.user, rec.item)
        try:
            user_gen = user_policy.generate(
                Context(
                    Role.USER,
                    history,
                    candidates=c_t,
                    rec_message=rec,
                    memory=memory,
                    peer=peer,
                    turn_index=t,
                ),
                rng,
            )
        except Exception as err:
            raise EpisodeError(f"{history.user} turn {t}: user backend failed: {err}", turns) from err
        user = user_gen.decoded
        problems = validate_user_message(user) if isinstance(user, UserMessage) else ["not a user message"]
        if problems:
            raise ProtocolViolation(problems[0], t)
        turns.append(
            InteractionTurn(t, history, c_t, memory, rec, user, peer, rec_gen, user_gen)
        )
        memory = update_memory(memory, rec, user)
        if user.action is Action.CLICK:
            break
        if cfg.remove_recommended_from_candidates:
            pool.remove(rec.item)
    final_item, terminated_by = finalize(turns)
    return Trajectory(history.user, tuple(turns), final_item, terminated_by, ground_truth)


def run_episodes(
    jobs: Sequence[tuple[UserHistory, Sequence[ItemId], ItemId | None]],
    rec_policy,
    user_policy,
    peer_source: PeerOpinionProvider | None = None,
    cfg: EpisodeConfig = EpisodeConfig(),
    workers: int = 1,
    greedy: bool = False,
) -> list[Trajectory]:
    """Run independent episodes, optionally on a thread pool.

    Results come back in job order, and every episode draws from its own
    generator, so the output does not depend on ``workers``.
    """

    def one(job):
        history, cands, gt = job
        rng = False if greedy else episode_rng(cfg.seed, history.user)
        return run_episode(history, cands, rec_policy, user_policy, peer_source, cfg, gt, rng)

    shared = getattr(rec_policy, "thread_safe", False) and getattr(user_policy, "thread_safe", False)
    if workers <= 1 or not shared:
        return [one(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, jobs))
