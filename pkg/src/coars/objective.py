"""Per-token training weights, the two agents' objectives, and their
gradients for toy policies.

For one role, with turn rewards ``R_t`` and clipped teacher-student gaps
``A_{t,n}``, the objective over a batch of episodes is::

    J = mean_episodes  sum_t  (1/|y_t|) sum_n (R_t + lam * A_{t,n}) * log p(y_{t,n})

Rewards and advantages are constants under differentiation. The
``direct_sd`` variant drops the token-level shaping and instead subtracts
``lam`` times the mean per-step KL(teacher || student) over the whole
step vocabulary.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distill import TokenCredit
from .errors import UsageError
from .policies.base import Context, Role
from .rewards import RewardBreakdown


class TeacherMode(str, enum.Enum):
    FIXED = "fixed"
    EMA = "ema"


class LossVariant(str, enum.Enum):
    CREDIT_ASSIGNMENT = "credit_assignment"
    DIRECT_SD = "direct_sd"


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_rec: float = 0.1
    lambda_user: float = 0.1
    teacher_mode: TeacherMode = TeacherMode.FIXED
    ema_rate: float = 0.05
    loss_variant: LossVariant = LossVariant.CREDIT_ASSIGNMENT

    def __post_init__(self):
        object.__setattr__(self, "teacher_mode", TeacherMode(self.teacher_mode))
        object.__setattr__(self, "loss_variant", LossVariant(self.loss_variant))
        if self.lambda_rec < 0 or self.lambda_user < 0:
            raise UsageError("lambda_rec and lambda_user must be >= 0")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise UsageError("ema_rate must lie in [0, 1]")

    def lam(self, role: Role) -> float:
        return self.lambda_rec if Role(role) is Role.REC else self.lambda_user


@dataclass(frozen=True)
class TurnSample:
    """One agent's output on one eligible turn, with everything the
    objective needs held fixed.

    ``reward_override`` replaces the breakdown's reward for this role
    (used to ablate the interaction reward). ``teacher_dists`` and
    ``student_dists`` hold per-step distributions and are only needed by
    ``direct_sd``.
    """

    role: Role
    episode: object
    context: Context
    tokens: tuple
    reward: RewardBreakdown
    credit: TokenCredit
    teacher_context: Context | None = None
    teacher_dists: tuple | None = None
    student_dists: tuple | None = None
    reward_override: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise UsageError("turn sample has no tokens")
        if len(self.credit) != len(self.tokens):
            raise UsageError("credit and tokens differ in length")

    @property
    def R(self) -> float:
        if self.reward_override is not None:
            return self.reward_override
        return self.reward.rec_reward if self.role is Role.REC else self.reward.user_reward

    @property
    def student_logps(self) -> np.ndarray:
        return self.credit.student_logps


@dataclass(frozen=True)
class TrainingBatch:
    samples: tuple[TurnSample, ...]
    excluded_turns: int = 0
    total_turns: int = 0

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        bad = [s for s in self.samples if not s.reward.rl_eligible]
        if bad:
            raise UsageError(
                f"batch contains {len(bad)} RL-ineligible turn(s); build batches with BatchBuilder"
            )

    def for_role(self, role: Role) -> "TrainingBatch":
        role = Role(role)
        return TrainingBatch(
            tuple(s for s in self.samples if s.role is role), self.excluded_turns, self.total_turns
        )

    @property
    def excluded_turn_fraction(self) -> float:
        return self.excluded_turns / self.total_turns if self.total_turns else 0.0

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class BatchBuilder:
    """Accumulates turn samples, dropping RL-ineligible turns.

    ``excluded_turns`` and ``total_turns`` count distinct turns, so adding
    the rec and user sample of one turn counts it once.
    """

    samples: list = field(default_factory=list)
    _seen: set = field(default_factory=set)
    _excluded: set = field(default_factory=set)

    def add(self, sample: TurnSample) -> bool:
        key = (sample.episode, sample.reward.turn_index)
        self._seen.add(key)
        if not sample.reward.rl_eligible:
            self._excluded.add(key)
            return False
        self.samples.append(sample)
        return True

    def note_turn(self, episode, turn_index: int, eligible: bool) -> None:
        """Count a turn that produced no samples (e.g. both roles frozen)."""
        self._seen.add((episode, turn_index))
        if not eligible:
            self._excluded.add((episode, turn_index))

    def build(self) -> TrainingBatch:
        return TrainingBatch(tuple(self.samples), len(self._excluded), len(self._seen))


def turn_token_weights(R: float, credit: TokenCredit | Sequence[float], lam: float) -> np.ndarray:
    if lam < 0:
        raise UsageError("lambda must be >= 0")
    adv = credit.advantages if isinstance(credit, TokenCredit) else np.asarray(credit, dtype=float)
    return R + lam * np.asarray(adv, dtype=float)


def _check_role_batch(batch: TrainingBatch, role: Role) -> tuple[TurnSample, ...]:
    role = Role(role)
    if not batch.samples:
        raise UsageError("objective of an empty batch is undefined")
    if any(s.role is not role for s in batch.samples):
        raise UsageError(f"batch must be filtered to role {role.value}")
    return batch.samples


def _episodes(samples) -> int:
    return len({s.episode for s in samples})


def _check_dist(p: np.ndarray) -> None:
    if abs(float(np.sum(p)) - 1.0) > 1e-9 or np.any(p < 0):
        raise UsageError("step distribution must be nonnegative and sum to 1")


def _kl(t: np.ndarray, s: np.ndarray) -> float:
    mask = t > 0
    if np.any(s[mask] <= 0):
        return math.inf
    return float(np.sum(t[mask] * (np.log(t[mask]) - np.log(s[mask]))))


def direct_sd_loss(teacher_dists: Sequence, student_dists: Sequence) -> float:
    """Mean over decoding steps of KL(teacher || student).

    Each step is either a probability vector or an ``(token_ids, probs)``
    pair; paired steps must list the same token ids.
    """
    if len(teacher_dists) != len(student_dists) or not teacher_dists:
        raise UsageError("teacher and student need the same nonzero number of steps")
    total = 0.0
    for t, s in zip(teacher_dists, student_dists):
        if isinstance(t, tuple):
            (t_ids, t), (s_ids, s) = t, s
            if not np.array_equal(np.asarray(t_ids), np.asarray(s_ids)):
                raise UsageError("teacher and student step vocabularies differ")
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        if t.shape != s.shape:
            raise UsageError("teacher and student step vocabularies differ")
        _check_dist(t)
        _check_dist(s)
        total += _kl(t, s)
    return total / len(teacher_dists)


def objective_value(batch: TrainingBatch, role: Role, cfg: ObjectiveConfig = ObjectiveConfig(), policy=None) -> float:
    """The role's objective on ``batch``.

    With ``policy`` given, student log-probabilities (and, for
    ``direct_sd``, student distributions) are recomputed from it while the
    weights stay fixed; this is what the gradient differentiates.
    """
    samples = _check_role_batch(batch, role)
    lam = cfg.lam(role)
    direct = cfg.loss_variant is LossVariant.DIRECT_SD
    total = 0.0
    for s in samples:
        logps = np.asarray(policy.logprob(s.context, s.tokens)) if policy is not None else s.student_logps
        if direct:
            total += s.R * float(np.mean(logps))
            if lam:
                if s.teacher_dists is None:
                    raise UsageError("direct_sd samples need teacher distributions")
                stud = policy.step_distributions(s.context, s.tokens) if policy is not None else s.student_dists
                if stud is None:
                    raise UsageError("direct_sd samples need student distributions or a policy")
                total -= lam * direct_sd_loss(list(s.teacher_dists), stud)
        else:
            w = turn_token_weights(s.R, s.credit, lam)
            total += float(np.dot(w, logps)) / len(logps)
    return total / _episodes(samples)


def rl_objective(batch: TrainingBatch, role: Role) -> float:
    """Outcome-only form: ``mean_episodes sum_t R_t * mean_n log p(y_{t,n})``."""
    samples = _check_role_batch(batch, role)
    total = sum(s.R * float(np.mean(s.student_logps)) for s in samples)
    return total / _episodes(samples)


def policy_gradient(batch: TrainingBatch, policy, role: Role, cfg: ObjectiveConfig = ObjectiveConfig()) -> np.ndarray:
    """Ascent direction of :func:`objective_value` in the policy's parameters."""
    samples = _check_role_batch(batch, role)
    lam = cfg.lam(role)
    direct = cfg.loss_variant is LossVariant.DIRECT_SD
    g = np.zeros(policy.n_params)
    for s in samples:
        n = len(s.tokens)
        if direct:
            g += policy.grad_logprob(s.context, s.tokens, np.full(n, s.R / n))
            if lam:
                g -= (lam / n) * policy.grad_kl(s.context, s.tokens, s.teacher_dists)
        else:
            w = turn_token_weights(s.R, s.credit, lam) / n
            g += policy.grad_logprob(s.context, s.tokens, w)
    return g / _episodes(samples)


def update_teacher(teacher_params: np.ndarray, student_params: np.ndarray, cfg: ObjectiveConfig) -> np.ndarray:
    t = np.asarray(teacher_params, dtype=float)
    s = np.asarray(student_params, dtype=float)
    if t.shape != s.shape:
        raise UsageError(f"teacher {t.shape} and student {s.shape} parameters differ in shape")
    if cfg.teacher_mode is TeacherMode.FIXED:
        return t.copy()
    return (1.0 - cfg.ema_rate) * t + cfg.ema_rate * s
