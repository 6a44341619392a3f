"""Flat ``key = value`` run configuration shared by the CLI subcommands."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .errors import DataError, UsageError
from .objective import LossVariant, ObjectiveConfig, TeacherMode
from .orchestrator import EpisodeConfig
from .rewards import RewardConfig

BACKENDS = ("toy", "scripted", "remote")
EPISODE_USERS = ("holdout", "train", "all")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # world
    world: str = "synthetic"
    log_path: str | None = None
    embeddings_path: str | None = None
    candidates_path: str | None = None
    distractors_path: str | None = None
    holdout_path: str | None = None
    holdout_fraction: float = 0.25
    k: int = 20
    embedding_dim: int = 32
    embedding_epochs: int = 20
    embedding_lr: float = 0.05
    synthetic_users: int = 200
    synthetic_blocks: int = 4
    synthetic_items: int = 40
    synthetic_history: int = 5
    synthetic_candidates: int = 10
    synthetic_dim: int = 8
    # interaction and rewards
    max_turns: int = 3
    remove_recommended: bool = True
    max_peers: int = 5
    alpha: float = 0.1
    depth_base: float = 1.2
    # objective
    lambda_rec: float = 0.1
    lambda_user: float = 0.1
    teacher_mode: str = "fixed"
    ema_rate: float = 0.05
    loss_variant: str = "credit_assignment"
    # toy training
    epochs: int = 200
    episodes_per_epoch: int = 32
    lr: float = 0.05
    ref_weight: float = 6.0
    schedule: str = "joint"
    eval_every: int = 1
    eval_rollouts: int = 1
    eval_greedy: bool = False
    eval_seed: int = 12345
    # backends
    rec_backend: str = "toy"
    user_backend: str = "toy"
    rec_params_path: str | None = None
    user_params_path: str | None = None
    endpoint: str | None = None
    timeout: float = 30.0
    max_tokens: int = 512
    temperature: float = 1.0
    concurrency: int = 4
    episode_users: str = "holdout"
    # outputs
    out_dir: str = "runs"
    trajectories_path: str | None = None

    def __post_init__(self):
        for name, allowed in (
            ("rec_backend", BACKENDS),
            ("user_backend", BACKENDS),
            ("episode_users", EPISODE_USERS),
            ("schedule", ("joint", "alternating")),
            ("teacher_mode", tuple(m.value for m in TeacherMode)),
            ("loss_variant", tuple(v.value for v in LossVariant)),
        ):
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {', '.join(allowed)}")
        if "remote" in (self.rec_backend, self.user_backend) and not self.endpoint:
            raise UsageError("remote backends need an endpoint")
        if self.world != "synthetic" and self.world != "files":
            raise UsageError("world must be 'synthetic' or 'files'")
        if self.world == "files" and not self.log_path:
            raise UsageError("world=files needs log_path")
        if self.concurrency < 1:
            raise UsageError("concurrency must be >= 1")
        # delegate range checks to the owning modules
        self.reward_config()
        self.objective_config()
        self.episode_config()

    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.alpha, self.depth_base)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.lambda_rec, self.lambda_user, self.teacher_mode, self.ema_rate, self.loss_variant)

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(self.max_turns, self.remove_recommended, self.seed)

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        changes = {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"override {item!r} is not key=value")
            key = key.strip()
            changes[key] = _parse_value(key, value.strip())
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    if "None" in kind and raw in ("", "none"):
        return None
    try:
        if kind.startswith("bool"):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.split(' ')[0]}") from None
    return raw


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def loads(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise DataError(f"expected 'key = value', got {stripped!r}", lineno)
        key = key.strip()
        if key in values:
            raise DataError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = _parse_value(key, value.strip())
        except UsageError as err:
            raise DataError(str(err), lineno) from None
    return RunConfig(**values)


def load(path: str | Path, overrides: Iterable[str] = ()) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot read config {path}: {err.strerror}") from None
    return loads(text).with_overrides(overrides)
