"""Coupled per-turn interaction rewards for the two agents."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .domain import ACCEPT_ACTIONS, Action, InteractionTurn, ItemId, Trajectory
from .errors import DomainError, UsageError


@dataclass(frozen=True)
class RewardConfig:
    """``alpha`` scales the peer-similarity modulation of the user reward;
    ``depth_base`` is the geometric growth of the pre-hit penalty."""

    alpha: float = 0.1
    depth_base: float = 1.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError("alpha must lie in [0, 1]")
        if not self.depth_base > 1.0:
            raise UsageError("depth_base must be > 1")


@dataclass(frozen=True)
class RewardBreakdown:
    turn_index: int
    hit: bool
    score: float
    depth_factor: float
    peer_similarity: float
    rec_reward: float
    user_reward: float
    rl_eligible: bool

    def __post_init__(self):
        if not (math.isfinite(self.rec_reward) and math.isfinite(self.user_reward)):
            raise DomainError("rewards must be finite")

    def to_json(self) -> dict:
        return asdict(self)


def depth_factor(t: int, hit_already_found: bool, cfg: RewardConfig = RewardConfig()) -> float:
    """Stage multiplier: ``depth_base ** (t - 1)`` until the target has been
    found, 1 from then on."""
    if t < 1:
        raise UsageError("turn index must be >= 1")
    if hit_already_found:
        return 1.0
    return cfg.depth_base ** (t - 1)


def rec_reward(hit: bool, s: float, D: float) -> float:
    return (2 * int(hit) - 1) * (0.5 + 0.5 * s) * D


def user_reward(hit: bool, s: float, q: float, cfg: RewardConfig = RewardConfig()) -> float:
    direction = 2 * s - 1
    return (2 * int(hit) - 1) * direction * (1 - cfg.alpha * q * direction)


def rl_eligible(hit: bool, action: Action) -> bool:
    # A wrong item the user still liked may just be unobserved in the data.
    return hit or Action(action) not in ACCEPT_ACTIONS


def score_turn(
    turn: InteractionTurn,
    ground_truth: ItemId,
    found_at: int | None,
    q: float,
    cfg: RewardConfig = RewardConfig(),
) -> RewardBreakdown:
    if not -1.0 <= q <= 1.0:
        raise DomainError(f"peer similarity {q} outside [-1, 1]")
    t = turn.turn_index
    hit = turn.rec.item == ground_truth
    found = found_at is not None and found_at <= t
    D = depth_factor(t, found, cfg)
    s = turn.user.score
    return RewardBreakdown(
        turn_index=t,
        hit=hit,
        score=s,
        depth_factor=D,
        peer_similarity=q,
        rec_reward=rec_reward(hit, s, D),
        user_reward=user_reward(hit, s, q, cfg),
        rl_eligible=rl_eligible(hit, turn.user.action),
    )


def first_hit(traj: Trajectory, ground_truth: ItemId) -> int | None:
    for turn in traj.turns:
        if turn.rec.item == ground_truth:
            return turn.turn_index
    return None


def score_trajectory(
    traj: Trajectory, cfg: RewardConfig = RewardConfig(), ground_truth: ItemId | None = None
) -> list[RewardBreakdown]:
    """Score every turn of ``traj`` using the peer similarity recorded on it."""
    gt = ground_truth if ground_truth is not None else traj.ground_truth
    if gt is None:
        raise UsageError(f"trajectory of {traj.user} has no ground truth")
    found_at = first_hit(traj, gt)
    return [score_turn(t, gt, found_at, t.peer_similarity, cfg) for t in traj.turns]
