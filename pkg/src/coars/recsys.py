"""Interaction data, a matrix-factorization base recommender, candidate
sets, and peer similarity.

The base recommender plays two roles: it ranks items to build candidate
sets (ground truth plus the top ``k - 1`` others) and it supplies the user
embeddings from which peer similarity is computed.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import ItemId, PeerOpinion, UserHistory, UserId
from .errors import DataError, DivergenceError, UsageError

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InteractionLog:
    """Deduplicated ``(user, item, timestamp)`` rows, sorted per user by time.

    Users are interned in order of first appearance and items in order of
    first appearance after sorting, so writing and re-reading a log is the
    identity. The dense ids are used for tie-breaking and embedding lookups.
    """

    rows: tuple[tuple[UserId, ItemId, int], ...]
    duplicates: int = 0
    users: tuple[UserId, ...] = field(init=False)
    items: tuple[ItemId, ...] = field(init=False)

    def __post_init__(self):
        users = dict.fromkeys(r[0] for r in self.rows)
        order = {u: k for k, u in enumerate(users)}
        rows = sorted(self.rows, key=lambda r: (order[r[0]], r[2]))
        items = dict.fromkeys(r[1] for r in rows)
        object.__setattr__(self, "rows", tuple(rows))
        object.__setattr__(self, "users", tuple(users))
        object.__setattr__(self, "items", tuple(items))

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, int]]) -> "InteractionLog":
        seen = {}
        dups = 0
        for u, i, ts in rows:
            key = (UserId(u), ItemId(i), int(ts))
            if key in seen:
                dups += 1
            else:
                seen[key] = None
        return cls(tuple(seen), dups)

    def __len__(self) -> int:
        return len(self.rows)

    def histories(self) -> dict[UserId, UserHistory]:
        events: dict[UserId, list] = {u: [] for u in self.users}
        for u, i, ts in self.rows:
            events[u].append((i, ts))
        return {u: UserHistory(u, tuple(ev)) for u, ev in events.items()}

    def item_users(self) -> dict[ItemId, tuple[UserId, ...]]:
        index: dict[ItemId, dict] = {}
        for u, i, _ in self.rows:
            index.setdefault(i, {})[u] = None
        return {i: tuple(us) for i, us in index.items()}

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for u, i, ts in self.rows:
                fh.write(f"{u}\t{i}\t{ts}\n")


def ingest(path: str | Path) -> InteractionLog:
    """Read a tab-separated ``user<TAB>item<TAB>timestamp`` file.

    Blank lines and lines starting with ``#`` are skipped. Duplicate
    triples are dropped and counted in ``InteractionLog.duplicates``.

    Raises
    ------
    DataError
        On a malformed line (with its line number) or when no rows remain.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
            user, item, ts = (p.strip() for p in parts)
            if not user or not item:
                raise DataError("empty user or item id", lineno)
            try:
                ts_val = int(ts)
            except ValueError:
                raise DataError(f"non-numeric timestamp {ts!r}", lineno) from None
            rows.append((user, item, ts_val))
    if not rows:
        raise DataError(f"{path}: no interactions")
    log = InteractionLog.from_rows(rows)
    if log.duplicates:
        _log.warning("%s: dropped %d duplicate rows", path, log.duplicates)
    return log


@dataclass(frozen=True)
class Split:
    train: InteractionLog
    ground_truth: dict[UserId, ItemId]
    histories: dict[UserId, UserHistory]
    dropped: int


def chronological_split(log: InteractionLog, holdout_per_user: int = 1) -> Split:
    """Leave-last-out split: each user's latest event becomes the test
    ground truth; users with fewer than two events are dropped."""
    if holdout_per_user != 1:
        raise UsageError("only holdout_per_user=1 is supported")
    train_rows = []
    gt = {}
    histories = {}
    dropped = 0
    for user, hist in log.histories().items():
        if len(hist.events) < 2:
            dropped += 1
            continue
        *past, (last_item, _) = hist.events
        gt[user] = last_item
        histories[user] = UserHistory(user, tuple(past))
        train_rows.extend((user, i, ts) for i, ts in past)
    return Split(InteractionLog(tuple(train_rows)), gt, histories, dropped)


class EmbeddingTable:
    """User and item vectors of a shared dimension."""

    def __init__(self, users: Sequence[UserId], items: Sequence[ItemId], user_vectors, item_vectors):
        self.users = tuple(users)
        self.items = tuple(items)
        self.user_vectors = np.asarray(user_vectors, dtype=float)
        self.item_vectors = np.asarray(item_vectors, dtype=float)
        if self.user_vectors.shape[0] != len(self.users) or self.item_vectors.shape[0] != len(self.items):
            raise UsageError("vector rows must match ids")
        if self.user_vectors.shape[1:] != self.item_vectors.shape[1:]:
            raise UsageError("user and item vectors must share a dimension")
        if not (np.all(np.isfinite(self.user_vectors)) and np.all(np.isfinite(self.item_vectors))):
            raise UsageError("embeddings must be finite")
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {i: k for k, i in enumerate(self.items)}
        self.losses: tuple[float, ...] = ()
        mean = self.user_vectors.mean(axis=0) if len(self.users) else np.zeros(self.dim)
        self._mean_user = mean
        centered = self.user_vectors - mean
        norms = np.linalg.norm(centered, axis=1, keepdims=True)
        self._unit_centered = np.divide(centered, norms, out=np.zeros_like(centered), where=norms > 0)

    @property
    def dim(self) -> int:
        return self.item_vectors.shape[1]

    def user_vector(self, user: UserId) -> np.ndarray:
        k = self.user_index.get(user)
        return self.user_vectors[k] if k is not None else self._mean_user

    def item_matrix(self, items: Sequence[ItemId]) -> np.ndarray:
        """Item vectors in the order of ``items`` (zeros for unknown items)."""
        out = np.zeros((len(items), self.dim))
        for row, i in enumerate(items):
            k = self.item_index.get(i)
            if k is not None:
                out[row] = self.item_vectors[k]
        return out

    def centered_unit(self, user: UserId) -> np.ndarray | None:
        k = self.user_index.get(user)
        return self._unit_centered[k] if k is not None else None

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"dim={self.dim}\n")
            for tag, ids, vecs in (("u", self.users, self.user_vectors), ("i", self.items, self.item_vectors)):
                for ident, v in zip(ids, vecs):
                    fh.write(f"{tag} {ident} " + " ".join(repr(float(x)) for x in v) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        users, uvecs, items, ivecs = [], [], [], []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header.startswith("dim="):
                raise DataError("missing 'dim=<d>' header", 1)
            try:
                dim = int(header[4:])
            except ValueError:
                raise DataError(f"bad header {header!r}", 1) from None
            for lineno, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                parts = line.split()
                if parts[0] not in ("u", "i") or len(parts) != dim + 2:
                    raise DataError(f"expected '<u|i> <id> {dim} values'", lineno)
                try:
                    vec = [float(x) for x in parts[2:]]
                except ValueError:
                    raise DataError("non-numeric vector entry", lineno) from None
                (users if parts[0] == "u" else items).append(parts[1])
                (uvecs if parts[0] == "u" else ivecs).append(vec)
        return cls(users, items, np.reshape(uvecs, (-1, dim)), np.reshape(ivecs, (-1, dim)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _expected_loss(P, Q, pairs, reg) -> float:
    # the per-sample objective SGD descends, averaged over the uniform negative
    u, i = pairs[:, 0], pairs[:, 1]
    pos = np.logaddexp(0.0, -np.einsum("nd,nd->n", P[u], Q[i]))
    neg = np.logaddexp(0.0, P @ Q.T).mean(axis=1)[u]
    sq_p, sq_q = np.sum(P * P, axis=1), np.sum(Q * Q, axis=1)
    penalty = 0.5 * reg * (sq_p[u] + sq_q[i] + sq_q.mean())
    return float(np.mean(pos + neg + penalty))


def train_embeddings(
    train: InteractionLog,
    dim: int = 32,
    epochs: int = 20,
    lr: float = 0.05,
    seed: int = 0,
    reg: float = 0.01,
    items: Sequence[ItemId] | None = None,
    users: Sequence[UserId] | None = None,
    batch_size: int = 64,
) -> EmbeddingTable:
    """Fit logistic matrix-factorization embeddings by minibatch SGD.

    Each observed (user, item) pair is paired with one negative item drawn
    uniformly from the item universe. ``items``/``users`` extend the
    universe beyond the training rows (e.g. held-out ground-truth items).
    After each epoch the expected loss over uniform negatives (exact, not
    sampled) is appended to ``table.losses``.

    Raises
    ------
    DivergenceError
        If the loss becomes non-finite.
    """
    if not len(train):
        raise UsageError("training log is empty")
    user_ids = list(dict.fromkeys([*train.users, *(users or ())]))
    item_ids = list(dict.fromkeys([*train.items, *(items or ())]))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    pairs = np.array(sorted({(uidx[u], iidx[i]) for u, i, _ in train.rows}), dtype=int)
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 0.1, (len(user_ids), dim))
    Q = rng.normal(0.0, 0.1, (len(item_ids), dim))
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        negatives = rng.integers(0, len(item_ids), len(pairs))
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            u, i = pairs[sel, 0], pairs[sel, 1]
            j = negatives[sel]
            pu, qi, qj = P[u], Q[i], Q[j]
            xp = np.einsum("nd,nd->n", pu, qi)
            xn = np.einsum("nd,nd->n", pu, qj)
            gp = (1.0 - _sigmoid(xp))[:, None]
            gn = (-_sigmoid(xn))[:, None]
            du = gp * qi + gn * qj - reg * pu
            di = gp * pu - reg * qi
            dj = gn * pu - reg * qj
            np.add.at(P, u, lr * du)
            np.add.at(Q, i, lr * di)
            np.add.at(Q, j, lr * dj)
        mean_loss = _expected_loss(P, Q, pairs, reg)
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"embedding loss became non-finite at epoch {epoch}")
        losses.append(mean_loss)
    table = EmbeddingTable(user_ids, item_ids, P, Q)
    table.losses = tuple(losses)
    return table


def rank_items(history: UserHistory, emb: EmbeddingTable) -> list[ItemId]:
    """All items not in the history, by descending dot-product score.

    Ties go to the lower interned item id. Unknown users are scored with
    the mean user vector.
    """
    scores = emb.item_vectors @ emb.user_vector(history.user)
    seen = set(history.items)
    order = np.lexsort((np.arange(len(emb.items)), -scores))
    return [emb.items[k] for k in order if emb.items[k] not in seen]


def build_candidates(
    history: UserHistory, ground_truth: ItemId, emb: EmbeddingTable, k: int = 20
) -> tuple[ItemId, ...]:
    """Ground truth plus the top ``k - 1`` ranked other items.

    Returned in interned-id order so the ground truth's position carries no
    signal. History items fill in only when too few unseen items remain.
    """
    if len(emb.items) < k:
        raise UsageError(f"item universe ({len(emb.items)}) smaller than k={k}")
    ranked = [i for i in rank_items(history, emb) if i != ground_truth]
    if len(ranked) < k - 1:
        scores = emb.item_vectors @ emb.user_vector(history.user)
        extra = sorted(
            (i for i in set(history.items) if i != ground_truth and i in emb.item_index),
            key=lambda i: (-scores[emb.item_index[i]], emb.item_index[i]),
        )
        ranked += extra
    chosen = {ground_truth, *ranked[: k - 1]}
    if len(chosen) != k:
        raise UsageError(f"cannot build {k} candidates for {history.user}")
    order = {i: n for n, i in enumerate(emb.items)}
    return tuple(sorted(chosen, key=lambda i: order.get(i, len(order))))


def _pair_rng(seed: int, user: UserId, item: ItemId) -> np.random.Generator:
    return np.random.default_rng(
        [seed, zlib.crc32(str(user).encode("utf-8")), zlib.crc32(str(item).encode("utf-8"))]
    )


class PeerOpinionSource:
    """Samples peers who interacted with an item and scores their similarity.

    Similarity is the mean cosine between mean-centered user vectors,
    clamped to [-1, 1]. Sampling is seeded per (user, item) pair, so
    repeated queries agree.
    """

    def __init__(
        self,
        emb: EmbeddingTable,
        train_log: InteractionLog,
        max_peers: int = 5,
        seed: int = 0,
        render_text: bool = True,
    ):
        self.emb = emb
        self.max_peers = max_peers
        self.seed = seed
        self.render_text = render_text
        self._item_users = train_log.item_users()
        self._histories = train_log.histories() if render_text else {}
        self._cache: dict[tuple[UserId, ItemId], tuple[float, UserId | None]] = {}

    def similarity(self, user: UserId, item: ItemId) -> tuple[float, UserId | None]:
        key = (user, item)
        if key in self._cache:
            return self._cache[key]
        peers = [p for p in self._item_users.get(item, ()) if p != user]
        me = self.emb.centered_unit(user)
        if not peers:
            out = (0.0, None)
        else:
            rng = _pair_rng(self.seed, user, item)
            if len(peers) > self.max_peers:
                pick = rng.choice(len(peers), size=self.max_peers, replace=False)
                peers = [peers[k] for k in sorted(pick)]
            chosen = peers[int(rng.integers(len(peers)))]
            if me is None:
                out = (0.0, chosen)
            else:
                cos = []
                for p in peers:
                    v = self.emb.centered_unit(p)
                    if v is not None:
                        cos.append(float(me @ v))
                raw = float(np.mean(cos)) if cos else 0.0
                out = (min(1.0, max(-1.0, raw)), chosen)
        self._cache[key] = out
        return out

    def opinion(self, user: UserId, item: ItemId) -> PeerOpinion:
        q, peer = self.similarity(user, item)
        text = ""
        if peer is not None and self.render_text:
            liked = [i for i in self._histories[peer].items if i != item][-3:]
            text = f"I interacted with {item}; it sits well with {', '.join(liked) or 'my history'}."
        return PeerOpinion(peer, item, text, q)


def peer_similarity(
    user: UserId,
    item: ItemId,
    emb: EmbeddingTable,
    train_log: InteractionLog,
    max_peers: int = 5,
    seed: int = 0,
) -> tuple[float, UserId | None]:
    return PeerOpinionSource(emb, train_log, max_peers, seed, render_text=False).similarity(user, item)


def sample_peer_opinion(
    user: UserId,
    item: ItemId,
    emb: EmbeddingTable,
    train_log: InteractionLog,
    seed: int = 0,
    max_peers: int = 5,
) -> PeerOpinion:
    return PeerOpinionSource(emb, train_log, max_peers, seed).opinion(user, item)
