"""Environments for training and evaluation: the synthetic block world and
worlds assembled from interaction files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import ItemId, UserHistory, UserId
from .errors import DataError, UsageError
from .evaluation import topk_distractors
from .recsys import (
    EmbeddingTable,
    InteractionLog,
    PeerOpinionSource,
    build_candidates,
    chronological_split,
    ingest,
    train_embeddings,
)


@dataclass(frozen=True)
class World:
    """Everything an episode needs, for a fixed user population.

    ``histories`` exclude each user's held-out last event, which is the
    user's ground truth. ``holdout_users`` never contribute training
    episodes.
    """

    histories: Mapping[UserId, UserHistory]
    ground_truth: Mapping[UserId, ItemId]
    candidates: Mapping[UserId, tuple[ItemId, ...]]
    distractors: Mapping[UserId, tuple[ItemId, ...]]
    emb: EmbeddingTable
    train_log: InteractionLog
    train_users: tuple[UserId, ...]
    holdout_users: tuple[UserId, ...]

    @property
    def items(self) -> tuple[ItemId, ...]:
        return self.emb.items

    def peer_source(self, max_peers: int = 5, seed: int = 0, render_text: bool = False) -> PeerOpinionSource:
        return PeerOpinionSource(self.emb, self.train_log, max_peers, seed, render_text)

    def save(self, directory: str | Path) -> None:
        """Write ``log.tsv``, ``embeddings.txt``, ``candidates.tsv``,
        ``distractors.tsv`` and ``holdout.txt`` into ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        rows = [(u, i, ts) for u in self.histories for i, ts in self.histories[u].events]
        last_ts = {u: (self.histories[u].events[-1][1] if self.histories[u].events else 0) for u in self.histories}
        rows += [(u, gt, last_ts[u] + 1) for u, gt in self.ground_truth.items()]
        InteractionLog.from_rows(rows).write(d / "log.tsv")
        self.emb.save(d / "embeddings.txt")
        write_item_lists(d / "candidates.tsv", self.ground_truth, self.candidates)
        write_item_lists(d / "distractors.tsv", self.ground_truth, self.distractors)
        (d / "holdout.txt").write_text("".join(f"{u}\n" for u in self.holdout_users), encoding="utf-8")


def write_item_lists(path, ground_truth: Mapping, lists: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in lists:
            fh.write(f"{u}\t{ground_truth[u]}\t{','.join(lists[u])}\n")


def read_item_lists(path) -> tuple[dict, dict]:
    """Inverse of :func:`write_item_lists`: ``(ground_truth, lists)``."""
    gt, lists = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 3 or not parts[2]:
                raise DataError("expected 'user<TAB>ground_truth<TAB>item,item,...'", lineno)
            gt[parts[0]] = parts[1]
            lists[parts[0]] = tuple(parts[2].split(","))
    return gt, lists


def _holdout(users: Sequence[UserId], fraction: float, seed: int) -> tuple[tuple, tuple]:
    if not 0.0 <= fraction < 1.0:
        raise UsageError("holdout_fraction must lie in [0, 1)")
    rng = np.random.default_rng([seed, 1])
    order = list(rng.permutation(len(users)))
    n_hold = int(round(fraction * len(users)))
    hold = {users[k] for k in order[:n_hold]}
    return tuple(u for u in users if u not in hold), tuple(u for u in users if u in hold)


def make_synthetic_world(
    seed: int = 0,
    n_users: int = 200,
    n_blocks: int = 4,
    n_items: int = 40,
    history_len: int = 5,
    n_candidates: int = 10,
    holdout_fraction: float = 0.25,
    dim: int = 8,
    emb_epochs: int = 40,
    emb_lr: float = 0.05,
) -> World:
    """Users in ``n_blocks`` preference blocks, each touching only items of
    its own block; the ground truth is a further unseen in-block item.

    Candidate sets hold the ground truth plus out-of-block items, and the
    user-sim distractors are out-of-block as well: the in-block items a
    recommender would rank next are indistinguishable from the ground truth
    by construction.
    """
    if n_items % n_blocks:
        raise UsageError("n_items must be a multiple of n_blocks")
    per_block = n_items // n_blocks
    if history_len + 1 > per_block:
        raise UsageError("history_len must leave an unseen in-block item")
    if n_candidates - 1 > n_items - per_block:
        raise UsageError("not enough out-of-block items for the candidate sets")
    rng = np.random.default_rng(seed)
    items = [ItemId(f"i{k:02d}") for k in range(n_items)]
    block_items = [items[b * per_block : (b + 1) * per_block] for b in range(n_blocks)]
    rows = []
    for n in range(n_users):
        user = UserId(f"u{n:03d}")
        own = block_items[n % n_blocks]
        seq = rng.choice(len(own), size=history_len + 1, replace=False)
        rows += [(user, own[k], ts) for ts, k in enumerate(seq, 1)]
    split = chronological_split(InteractionLog.from_rows(rows))
    emb = train_embeddings(split.train, dim=dim, epochs=emb_epochs, lr=emb_lr, seed=seed, items=items)
    candidates, distractors = {}, {}
    for n, user in enumerate(split.ground_truth):
        gt = split.ground_truth[user]
        others = [i for b, blk in enumerate(block_items) if b != n % n_blocks for i in blk]
        pick = rng.choice(len(others), size=n_candidates - 1, replace=False)
        pool = {gt, *(others[k] for k in pick)}
        candidates[user] = tuple(i for i in items if i in pool)
        ds = rng.choice(len(others), size=3, replace=False)
        distractors[user] = tuple(others[k] for k in sorted(ds))
    users = tuple(split.ground_truth)
    train_users, holdout_users = _holdout(users, holdout_fraction, seed)
    return World(split.histories, split.ground_truth, candidates, distractors, emb, split.train, train_users, holdout_users)


def load_world(
    log_path: str | Path,
    embeddings_path: str | Path | None = None,
    candidates_path: str | Path | None = None,
    distractors_path: str | Path | None = None,
    holdout_path: str | Path | None = None,
    k: int = 20,
    holdout_fraction: float = 0.25,
    seed: int = 0,
    dim: int = 32,
    emb_epochs: int = 20,
    emb_lr: float = 0.05,
) -> World:
    """Assemble a world from files, filling in whatever is not supplied
    (embeddings are trained, candidates and distractors come from the base
    recommender, the holdout is a seeded random fraction of users)."""
    split = chronological_split(ingest(log_path))
    if not split.ground_truth:
        raise DataError(f"{log_path}: no user has two or more events")
    all_items = list(dict.fromkeys([*split.train.items, *split.ground_truth.values()]))
    if embeddings_path is not None:
        emb = EmbeddingTable.load(embeddings_path)
        missing = [i for i in all_items if i not in emb.item_index]
        if missing:
            raise DataError(f"{embeddings_path}: no vector for item {missing[0]}")
    else:
        emb = train_embeddings(split.train, dim=dim, epochs=emb_epochs, lr=emb_lr, seed=seed, items=all_items)
    users = tuple(split.ground_truth)
    if candidates_path is not None:
        _, candidates = read_item_lists(candidates_path)
    else:
        candidates = {u: build_candidates(split.histories[u], split.ground_truth[u], emb, k) for u in users}
    if distractors_path is not None:
        _, distractors = read_item_lists(distractors_path)
    else:
        distractors = {u: topk_distractors(split.histories[u], split.ground_truth[u], emb) for u in users}
    for name, table in (("candidates", candidates), ("distractors", distractors)):
        absent = [u for u in users if u not in table]
        if absent:
            raise DataError(f"no {name} for user {absent[0]}")
    for u in users:
        if split.ground_truth[u] not in candidates[u]:
            raise DataError(f"candidates of {u} miss the ground truth")
    if holdout_path is not None:
        hold = set(Path(holdout_path).read_text(encoding="utf-8").split())
        train_users = tuple(u for u in users if u not in hold)
        holdout_users = tuple(u for u in users if u in hold)
    else:
        train_users, holdout_users = _holdout(users, holdout_fraction, seed)
    return World(split.histories, split.ground_truth, candidates, distractors, emb, split.train, train_users, holdout_users)
