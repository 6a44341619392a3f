"""Co-evolution loop for toy policies.

Each epoch collects episodes with both current (student) policies, scores
them, builds diagnostic references for the teacher, and then updates both
policies from the same trajectories by plain gradient ascent. Updates use
pre-update counterparts, i.e. they are simultaneous.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .distill import build_reference, token_advantages
from .domain import Trajectory
from .errors import DivergenceError, EpisodeError, ReferenceConstructionError, UsageError
from .evaluation import run_rec_eval, run_user_sim_eval
from .objective import (
    BatchBuilder,
    LossVariant,
    ObjectiveConfig,
    TurnSample,
    objective_value,
    policy_gradient,
    update_teacher,
)
from .orchestrator import EpisodeConfig, run_episode
from .policies.base import Role, rec_context_for, user_context_for
from .policies.toy import ToyPolicy, Vocabulary
from .rewards import RewardConfig, score_trajectory
from .world import World

_log = logging.getLogger(__name__)

SCHEDULES = ("joint", "alternating")


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of :func:`train`.

    ``train_rec``/``train_user`` freeze a policy when false;
    ``use_rec_reward``/``use_user_reward`` zero that agent's interaction
    reward while keeping its distillation term.
    """

    epochs: int = 200
    episodes_per_epoch: int = 32
    lr: float = 0.05
    seed: int = 0
    max_turns: int = 3
    max_peers: int = 5
    ref_weight: float = 6.0
    rewards: RewardConfig = field(default_factory=RewardConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train_rec: bool = True
    train_user: bool = True
    use_rec_reward: bool = True
    use_user_reward: bool = True
    schedule: str = "joint"
    eval_every: int = 1
    eval_greedy: bool = False
    eval_seed: int = 12345
    eval_rollouts: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise UsageError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise UsageError("lr must be a positive finite number")
        if self.schedule not in SCHEDULES:
            raise UsageError(f"schedule must be one of {SCHEDULES}")
        if self.eval_every < 1:
            raise UsageError("eval_every must be >= 1")
        if self.eval_rollouts < 1:
            raise UsageError("eval_rollouts must be >= 1")


def make_toy_policies(world: World, ref_weight: float = 6.0) -> tuple[ToyPolicy, ToyPolicy]:
    vocab = Vocabulary(world.items)
    vecs = world.emb.item_vectors
    return (
        ToyPolicy(Role.REC, vocab, vecs, ref_weight=ref_weight),
        ToyPolicy(Role.USER, vocab, vecs, ref_weight=ref_weight),
    )


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(str(k).encode("utf-8")) for k in keys])


def evaluate(world: World, rec: ToyPolicy, user: ToyPolicy, cfg: TrainConfig, peers=None) -> dict:
    """Held-out Hit@1 and 1:3 user-sim F1, averaged over
    ``cfg.eval_rollouts`` seeded rollouts (one suffices when greedy)."""
    peers = peers or world.peer_source(cfg.max_peers, cfg.seed)
    users = world.holdout_users
    hits, f1s = [], []
    for r in range(1 if cfg.eval_greedy else cfg.eval_rollouts):
        seed = cfg.eval_seed + r
        ep_cfg = EpisodeConfig(max_turns=cfg.max_turns, seed=seed)
        rec_report, _ = run_rec_eval(
            rec, user, world.histories, world.ground_truth, world.candidates, peers, ep_cfg,
            greedy=cfg.eval_greedy, users=users,
        )
        sim = run_user_sim_eval(
            user, world.histories, world.ground_truth, seed=seed,
            distractors=world.distractors, peer_source=peers, greedy=cfg.eval_greedy, users=users,
        )
        hits.append(rec_report.hit_at_1)
        f1s.append(sim.f1)
    return {"holdout_hit_at_1": _mean(hits), "holdout_user_f1": _mean(f1s)}


def _samples_for(
    traj: Trajectory,
    episode: int,
    rec: ToyPolicy,
    user: ToyPolicy,
    teachers: dict,
    cfg: TrainConfig,
    builder: BatchBuilder,
) -> None:
    obj = cfg.objective
    direct = obj.loss_variant is LossVariant.DIRECT_SD
    roles = [r for r, on in ((Role.REC, cfg.train_rec), (Role.USER, cfg.train_user)) if on]
    for turn, br in zip(traj.turns, score_trajectory(traj, cfg.rewards)):
        builder.note_turn(episode, turn.turn_index, br.rl_eligible)
        if not br.rl_eligible or not roles:
            continue
        ref = None
        if any(obj.lam(r) > 0 for r in roles):
            try:
                ref = build_reference(turn, traj.ground_truth, rec, user)
            except ReferenceConstructionError as err:
                _log.debug("reward-only turn: %s", err)
        for role in roles:
            if role is Role.REC:
                ctx, gen, use_r = rec_context_for(turn), turn.rec_generation, cfg.use_rec_reward
            else:
                ctx, gen, use_r = user_context_for(turn), turn.user_generation, cfg.use_user_reward
            student = rec if role is Role.REC else user
            tctx = ctx.with_reference(ref) if ref is not None else ctx
            teacher = teachers[role]
            t_logps = teacher.logprob(tctx, gen.tokens) if obj.lam(role) > 0 else gen.logps
            t_dists = s_dists = None
            if direct and obj.lam(role) > 0:
                t_dists = tuple(teacher.step_distributions(tctx, gen.tokens))
                s_dists = tuple(student.step_distributions(ctx, gen.tokens))
            builder.add(
                TurnSample(
                    role, episode, ctx, gen.tokens, br,
                    token_advantages(t_logps, gen.logps, gen.tokens),
                    teacher_context=tctx,
                    teacher_dists=t_dists,
                    student_dists=s_dists,
                    reward_override=None if use_r else 0.0,
                )
            )


@dataclass
class TrainingResult:
    rec_policy: ToyPolicy
    user_policy: ToyPolicy
    baseline: dict | None
    epochs: list = field(default_factory=list)
    dropped_episodes: int = 0

    def to_json(self, config: dict | None = None) -> dict:
        out = {"baseline": self.baseline, "epochs": self.epochs, "dropped_episodes": self.dropped_episodes}
        if config is not None:
            out = {"config": config, **out}
        return out

    @property
    def final(self) -> dict | None:
        evaluated = [r for r in self.epochs if r["holdout_hit_at_1"] is not None]
        return evaluated[-1] if evaluated else None


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else 0.0


def train(
    world: World,
    cfg: TrainConfig = TrainConfig(),
    rec_policy: ToyPolicy | None = None,
    user_policy: ToyPolicy | None = None,
) -> TrainingResult:
    """Run ``cfg.epochs`` epochs of joint training.

    Raises
    ------
    DivergenceError
        If a parameter or objective becomes non-finite; the report so far
        is attached.
    """
    if not world.train_users or not world.holdout_users:
        raise UsageError("world needs both training and held-out users")
    if rec_policy is None or user_policy is None:
        r0, u0 = make_toy_policies(world, cfg.ref_weight)
        rec_policy, user_policy = rec_policy or r0, user_policy or u0
    rec, user = rec_policy, user_policy
    if cfg.epochs == 0:
        return TrainingResult(rec, user, None)
    peers = world.peer_source(cfg.max_peers, cfg.seed)
    teacher_params = {Role.REC: rec.params, Role.USER: user.params}
    result = TrainingResult(rec, user, evaluate(world, rec, user, cfg, peers))
    ep_cfg = EpisodeConfig(max_turns=cfg.max_turns, seed=cfg.seed)
    train_users = list(world.train_users)
    n_eps = min(cfg.episodes_per_epoch, len(train_users))
    for epoch in range(1, cfg.epochs + 1):
        pick = _rng(cfg.seed, epoch, "users").choice(len(train_users), size=n_eps, replace=False)
        teachers = {Role.REC: rec.with_params(teacher_params[Role.REC]), Role.USER: user.with_params(teacher_params[Role.USER])}
        builder = BatchBuilder()
        rec_rewards, user_rewards = [], []
        for k in sorted(pick):
            u = train_users[k]
            try:
                traj = run_episode(
                    world.histories[u], world.candidates[u], rec, user, peers, ep_cfg, world.ground_truth[u],
                    rng=_rng(cfg.seed, epoch, u),
                )
            except EpisodeError as err:
                result.dropped_episodes += 1
                _log.warning("epoch %d: dropped episode: %s", epoch, err)
                continue
            for br in score_trajectory(traj, cfg.rewards):
                rec_rewards.append(br.rec_reward)
                user_rewards.append(br.user_reward)
            _samples_for(traj, int(k), rec, user, teachers, cfg, builder)
        batch = builder.build()
        record = {
            "epoch": epoch,
            "mean_rec_reward": _mean(rec_rewards),
            "mean_user_reward": _mean(user_rewards),
            "J_rec": None,
            "J_user": None,
            "holdout_hit_at_1": None,
            "holdout_user_f1": None,
            "excluded_turn_fraction": batch.excluded_turn_fraction,
        }
        updates = {}
        for role, policy, key in ((Role.REC, rec, "J_rec"), (Role.USER, user, "J_user")):
            part = batch.for_role(role)
            if not len(part):
                continue
            value = objective_value(part, role, cfg.objective, policy if cfg.objective.loss_variant is LossVariant.DIRECT_SD else None)
            record[key] = value
            if cfg.schedule == "alternating" and (epoch % 2 == 1) != (role is Role.REC):
                continue
            updates[role] = policy.params + cfg.lr * policy_gradient(part, policy, role, cfg.objective)
        for role, params in updates.items():
            bad = not np.all(np.isfinite(params))
            if bad or not all(math.isfinite(record[k]) for k in ("J_rec", "J_user") if record[k] is not None):
                result.epochs.append(record)
                raise DivergenceError(
                    f"epoch {epoch}: non-finite {'parameters' if bad else 'objective'} for {role.value}",
                    result.to_json(),
                )
        if Role.REC in updates:
            rec = rec.with_params(updates[Role.REC])
        if Role.USER in updates:
            user = user.with_params(updates[Role.USER])
        for role, policy in ((Role.REC, rec), (Role.USER, user)):
            teacher_params[role] = update_teacher(teacher_params[role], policy.params, cfg.objective)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record.update(evaluate(world, rec, user, cfg, peers))
        result.epochs.append(record)
        result.rec_policy, result.user_policy = rec, user
    return result


def config_json(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["objective"] = {k: getattr(v, "value", v) for k, v in out["objective"].items()}
    return out


def ablation_config(cfg: TrainConfig, drop: str) -> TrainConfig:
    """The single-component ablation of ``cfg`` named by ``drop``."""
    if drop == "user-training":
        return replace(cfg, train_user=False)
    if drop == "rec-training":
        return replace(cfg, train_rec=False)
    if drop == "ir-rec":
        return replace(cfg, use_rec_reward=False)
    if drop == "ir-user":
        return replace(cfg, use_user_reward=False)
    if drop == "sd-rec":
        return replace(cfg, objective=replace(cfg.objective, lambda_rec=0.0))
    if drop == "sd-user":
        return replace(cfg, objective=replace(cfg.objective, lambda_user=0.0))
    raise UsageError(f"unknown ablation {drop!r}")


ABLATIONS = ("user-training", "rec-training", "ir-rec", "ir-user", "sd-rec", "sd-user")
