"""Hit@1 over final selections and 1:3 user-simulation F1.

F1 is micro-averaged over individual accept/reject decisions: each case
contributes four decisions, the ground truth labeled accept and the three
distractors labeled reject.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import (
    Action,
    ItemId,
    Memory,
    RecMessage,
    Trajectory,
    UserHistory,
    UserId,
    is_accept,
)
from .errors import DomainError, UsageError
from .orchestrator import EpisodeConfig, episode_rng, run_episodes
from .policies.base import Context, Role
from .recsys import EmbeddingTable, rank_items


def hit_at_1(final_item: ItemId, ground_truth: ItemId) -> int:
    return int(final_item == ground_truth)


def mean_hit_at_1(trajectories: Iterable[Trajectory]) -> float:
    hits = [hit_at_1(t.final_item, t.ground_truth) for t in trajectories]
    if not hits:
        raise UsageError("no trajectories to evaluate")
    return float(np.mean(hits))


@dataclass(frozen=True)
class UserSimCase:
    """One 1:3 candidate set and the user policy's decision on each item."""

    ground_truth: ItemId
    distractors: tuple[ItemId, ...]
    decisions: Mapping[ItemId, tuple[Action, float]]
    user: UserId | None = None

    def __post_init__(self):
        object.__setattr__(self, "distractors", tuple(self.distractors))
        if len(self.distractors) != 3:
            raise DomainError("a user-sim case needs exactly 3 distractors")
        if len({self.ground_truth, *self.distractors}) != 4:
            raise DomainError("user-sim candidates must be 4 distinct items")
        missing = {self.ground_truth, *self.distractors} - set(self.decisions)
        if missing:
            raise DomainError(f"no decision for {sorted(missing)}")

    @property
    def candidates(self) -> tuple[ItemId, ...]:
        return (self.ground_truth, *self.distractors)

    def counts(self) -> tuple[int, int, int]:
        """``(tp, fp, fn)`` over this case's four decisions."""
        tp = int(is_accept(self.decisions[self.ground_truth][0]))
        fp = sum(int(is_accept(self.decisions[d][0])) for d in self.distractors)
        return tp, fp, 1 - tp


@dataclass(frozen=True)
class F1Stats:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def user_sim_stats(cases: Sequence[UserSimCase]) -> F1Stats:
    if not cases:
        raise UsageError("user-sim F1 needs at least one case")
    tp = fp = fn = 0
    for c in cases:
        a, b, d = c.counts()
        tp, fp, fn = tp + a, fp + b, fn + d
    if tp + fp == 0 or tp + fn == 0:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return F1Stats(p, r, 0.0, tp, fp, fn)
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return F1Stats(p, r, f1, tp, fp, fn)


def user_sim_f1(cases: Sequence[UserSimCase]) -> float:
    return user_sim_stats(cases).f1


@dataclass(frozen=True)
class EvalReport:
    n_cases: int
    hit_at_1: float | None = None
    f1: float | None = None
    precision: float | None = None
    recall: float | None = None
    per_case: list = field(default_factory=list)

    def to_json(self, detail: bool = True) -> dict:
        out = asdict(self)
        if not detail:
            out["per_case"] = None
        return out


def topk_distractors(history: UserHistory, ground_truth: ItemId, emb: EmbeddingTable, n: int = 3):
    ranked = [i for i in rank_items(history, emb) if i != ground_truth]
    if len(ranked) < n:
        raise UsageError(f"only {len(ranked)} distractors available for {history.user}")
    return tuple(ranked[:n])


def judge_case(
    user_policy,
    history: UserHistory,
    ground_truth: ItemId,
    distractors: Sequence[ItemId],
    peer_source=None,
    rng: np.random.Generator | None = None,
) -> UserSimCase:
    """Ask the user policy about each of the four candidates independently,
    each as a fresh first-turn recommendation with empty memory."""
    cands = (ground_truth, *distractors)
    decisions = {}
    for item in cands:
        peer = peer_source.opinion(history.user, item) if peer_source is not None else None
        ctx = Context(
            Role.USER,
            history,
            candidates=cands,
            rec_message=RecMessage(item, ""),
            memory=Memory(),
            peer=peer,
        )
        msg = user_policy.generate(ctx, rng).decoded
        decisions[item] = (msg.action, msg.score)
    return UserSimCase(ground_truth, tuple(distractors), decisions, history.user)


def run_user_sim_eval(
    user_policy,
    histories: Mapping[UserId, UserHistory],
    ground_truth: Mapping[UserId, ItemId],
    emb: EmbeddingTable | None = None,
    seed: int = 0,
    distractors: Mapping[UserId, Sequence[ItemId]] | None = None,
    peer_source=None,
    greedy: bool = False,
    users: Sequence[UserId] | None = None,
) -> EvalReport:
    """1:3 user-simulation F1.

    Distractors come from ``distractors`` when given, otherwise they are
    the base recommender's top-3 non-ground-truth items.
    """
    users = list(users) if users is not None else sorted(ground_truth)
    cases = []
    for u in users:
        if distractors is not None:
            ds = tuple(distractors[u])
        elif emb is not None:
            ds = topk_distractors(histories[u], ground_truth[u], emb)
        else:
            raise UsageError("need either embeddings or explicit distractors")
        rng = None if greedy else episode_rng(seed, u)
        cases.append(judge_case(user_policy, histories[u], ground_truth[u], ds, peer_source, rng))
    stats = user_sim_stats(cases)
    per_case = [
        {
            "user": c.user,
            "ground_truth": c.ground_truth,
            "decisions": {i: [a.value, s] for i, (a, s) in c.decisions.items()},
        }
        for c in cases
    ]
    return EvalReport(len(cases), None, stats.f1, stats.precision, stats.recall, per_case)


def run_rec_eval(
    rec_policy,
    user_policy,
    histories: Mapping[UserId, UserHistory],
    ground_truth: Mapping[UserId, ItemId],
    candidates: Mapping[UserId, Sequence[ItemId]],
    peer_source=None,
    cfg: EpisodeConfig = EpisodeConfig(),
    greedy: bool = False,
    workers: int = 1,
    users: Sequence[UserId] | None = None,
) -> tuple[EvalReport, list[Trajectory]]:
    """Hit@1 of the final selection over full episodes."""
    users = list(users) if users is not None else sorted(ground_truth)
    jobs = [(histories[u], candidates[u], ground_truth[u]) for u in users]
    trajs = run_episodes(jobs, rec_policy, user_policy, peer_source, cfg, workers, greedy)
    per_case = [
        {
            "user": t.user,
            "ground_truth": t.ground_truth,
            "final_item": t.final_item,
            "turns": len(t),
            "hit": hit_at_1(t.final_item, t.ground_truth),
        }
        for t in trajs
    ]
    hit = float(np.mean([c["hit"] for c in per_case])) if per_case else 0.0
    return EvalReport(len(trajs), hit, per_case=per_case), trajs
