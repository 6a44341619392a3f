"""Small differentiable softmax policies standing in for LLM agents.

A toy policy emits a short structured token sequence:

* rec role: ``(item, END)``
* user role: ``(action, score-bucket, END)``

Every step is a softmax over the tokens allowed at that step, with logits
linear in the parameters: ``logit_v = theta . psi(ctx, prefix, v)``. The
feature vector ``psi`` is built from the recency-weighted history profile
(history items projected through the recommender's item vectors), the
candidate and memory state, the peer similarity, and two reference
indicators that are only nonzero in teacher mode. Because the model is
log-linear, the score-function gradient has the closed form
``psi_y - E_p[psi]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..domain import (
    Action,
    GenerationResult,
    ItemId,
    RecMessage,
    UserMessage,
)
from ..errors import BackendError, DecodeError, UsageError
from .base import Context, Role

ACTIONS = tuple(Action)
N_BUCKETS = 10
BUCKETS_FOR_ACTION: dict[Action, tuple[int, ...]] = {
    Action.DISLIKE: (0, 1, 2),
    Action.SKIP: (3, 4),
    Action.STAR: (5, 6, 7),
    Action.CLICK: (8, 9),
}
ACTION_FOR_BUCKET = {b: a for a, bs in BUCKETS_FOR_ACTION.items() for b in bs}


def bucket_midpoint(b: int) -> float:
    return round(0.1 * b + 0.05, 10)


def bucket_for(action: Action, score: float) -> int:
    """The bucket of ``action`` whose midpoint is closest to ``score``."""
    return min(BUCKETS_FOR_ACTION[Action(action)], key=lambda b: abs(bucket_midpoint(b) - score))


class Vocabulary:
    """Token inventory: one token per item, 4 action tokens, 10 score
    buckets and an end token, in that order."""

    def __init__(self, items: Sequence[ItemId]):
        self.items = tuple(items)
        if len(set(self.items)) != len(self.items):
            raise UsageError("vocabulary items must be unique")
        self.item_index = {item: k for k, item in enumerate(self.items)}
        n = len(self.items)
        self.action_offset = n
        self.bucket_offset = n + len(ACTIONS)
        self.end = self.bucket_offset + N_BUCKETS
        self.size = self.end + 1

    def item_token(self, item: ItemId) -> int:
        return self.item_index[item]

    def action_token(self, action: Action) -> int:
        return self.action_offset + ACTIONS.index(Action(action))

    def bucket_token(self, b: int) -> int:
        return self.bucket_offset + b

    def kind(self, tok: int) -> str:
        if tok < self.action_offset:
            return "item"
        if tok < self.bucket_offset:
            return "action"
        if tok < self.end:
            return "bucket"
        return "end"

    def name(self, tok: int) -> str:
        kind = self.kind(tok)
        if kind == "item":
            return f"item:{self.items[tok]}"
        if kind == "action":
            return f"action:{ACTIONS[tok - self.action_offset].value}"
        if kind == "bucket":
            return f"bucket-{tok - self.bucket_offset}"
        return "<end>"

    def check(self, tokens: Sequence) -> list[int]:
        out = []
        for tok in tokens:
            if isinstance(tok, (bool, np.bool_)) or not isinstance(tok, (int, np.integer)):
                raise UsageError(f"unknown token {tok!r}")
            if not 0 <= tok < self.size:
                raise UsageError(f"unknown token {tok!r}")
            out.append(int(tok))
        return out


def decode_message(tokens: Sequence[int], role: Role, vocab: Vocabulary, rationale: str = "") -> RecMessage | UserMessage:
    """Decode a toy token sequence into a protocol message.

    Raises
    ------
    DecodeError
        If the sequence does not follow the role's grammar or the score
        bucket lies outside the chosen action's interval.
    """
    tokens = list(tokens)
    if not tokens or tokens[-1] != vocab.end:
        raise DecodeError("sequence must end with the end token")
    body = tokens[:-1]
    kinds = [vocab.kind(t) for t in body]
    if Role(role) is Role.REC:
        if kinds != ["item"]:
            raise DecodeError(f"rec sequence must be (item, END), got {kinds}")
        item = vocab.items[body[0]]
        return RecMessage(item, rationale or f"toy:item={item}")
    if kinds != ["action", "bucket"]:
        raise DecodeError(f"user sequence must be (action, bucket, END), got {kinds}")
    action = ACTIONS[body[0] - vocab.action_offset]
    b = body[1] - vocab.bucket_offset
    if b not in BUCKETS_FOR_ACTION[action]:
        raise DecodeError(f"bucket-{b} outside {action.value} interval")
    return UserMessage(action, bucket_midpoint(b), rationale or f"toy:{action.value}")


@dataclass(frozen=True)
class _Layout:
    d: int

    @property
    def bil(self) -> int:
        return self.d * self.d

    # rec: [bilinear | recommended-before | previous score | candidate | ref item]
    @property
    def rec_size(self) -> int:
        return self.bil + 4

    # user: per action [bilinear | q | bias | memory length], then bucket
    # biases, then ref-action and ref-bucket weights.
    @property
    def action_block(self) -> int:
        return self.bil + 3

    @property
    def user_size(self) -> int:
        return 4 * self.action_block + N_BUCKETS + 2


class ToyPolicy:
    """Log-linear token policy for one role.

    Parameters
    ----------
    role : Role
        Which agent this policy plays.
    vocab : Vocabulary
        Shared token inventory.
    item_vectors : ndarray, shape (n_items, d)
        Item representations aligned with ``vocab.items``, typically the
        base recommender's item embeddings.
    params : ndarray, optional
        Flat parameter vector. Defaults to zeros (a uniform policy) with the
        reference weights set to ``ref_weight``.
    ref_weight : float
        Initial weight of the reference indicators. This is what makes the
        teacher mode (context with a diagnostic reference) differ from the
        student mode; with it at zero the two coincide.
    masked : bool
        Restrict each step to grammatical tokens. With ``masked=False``
        every step is a softmax over the whole vocabulary and ungrammatical
        samples are retried up to ``max_retries`` times.
    """

    thread_safe = True

    def __init__(
        self,
        role: Role,
        vocab: Vocabulary,
        item_vectors: np.ndarray,
        params: np.ndarray | None = None,
        *,
        ref_weight: float = 6.0,
        masked: bool = True,
        temperature: float = 1.0,
        recency: float = 0.7,
        max_retries: int = 3,
    ):
        self.role = Role(role)
        self.vocab = vocab
        self.item_vectors = np.asarray(item_vectors, dtype=float)
        if self.item_vectors.shape[0] != len(vocab.items):
            raise UsageError("item_vectors rows must match the vocabulary items")
        self.layout = _Layout(self.item_vectors.shape[1])
        self.masked = masked
        if temperature <= 0:
            raise UsageError("temperature must be positive")
        self.temperature = float(temperature)
        self.recency = recency
        self.max_retries = max_retries
        n = self.n_params
        if params is None:
            params = np.zeros(n)
            params[self._ref_slots] = ref_weight
        params = np.array(params, dtype=float)
        if params.shape != (n,):
            raise UsageError(f"expected {n} parameters, got shape {params.shape}")
        params.flags.writeable = False
        self._params = params

    # -- parameters ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.layout.rec_size if self.role is Role.REC else self.layout.user_size

    @property
    def params(self) -> np.ndarray:
        return self._params.copy()

    @property
    def _ref_slots(self) -> list[int]:
        if self.role is Role.REC:
            return [self.layout.rec_size - 1]
        return [self.layout.user_size - 2, self.layout.user_size - 1]

    def with_params(self, params: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(
            self.role,
            self.vocab,
            self.item_vectors,
            params,
            masked=self.masked,
            temperature=self.temperature,
            recency=self.recency,
            max_retries=self.max_retries,
        )

    # -- features -----------------------------------------------------------

    def profile(self, ctx: Context) -> np.ndarray:
        idx = [self.vocab.item_index[i] for i in ctx.history.items if i in self.vocab.item_index]
        if not idx:
            return np.zeros(self.layout.d)
        w = self.recency ** np.arange(len(idx) - 1, -1, -1, dtype=float)
        return (w / w.sum()) @ self.item_vectors[idx]

    def _item_vec(self, item: ItemId) -> np.ndarray:
        k = self.vocab.item_index.get(item)
        return self.item_vectors[k] if k is not None else np.zeros(self.layout.d)

    def _n_steps(self) -> int:
        return 2 if self.role is Role.REC else 3

    def step_table(self, ctx: Context, prefix: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Allowed token ids and their feature rows at the step after ``prefix``."""
        if ctx.role is not self.role:
            raise UsageError(f"{self.role.value} policy got a {ctx.role.value} context")
        step = len(prefix)
        if self.role is Role.REC:
            return self._rec_table(ctx, step)
        return self._user_table(ctx, prefix)

    def _rec_table(self, ctx: Context, step: int):
        V = self.vocab
        lay = self.layout
        if self.masked:
            if step == 0:
                allowed = [V.item_index[c] for c in ctx.candidates if c in V.item_index]
                if not allowed:
                    raise BackendError("no candidate is known to the toy vocabulary")
            else:
                allowed = [V.end]
        else:
            allowed = list(range(V.size))
        psi = np.zeros((len(allowed), lay.rec_size))
        if not self.masked or step == 0:
            prof = self.profile(ctx)
            cands = set(ctx.candidates)
            scores = {rec.item: user.score for rec, user in ctx.memory.records}
            ref_item = ctx.reference.corrected_rec.item if ctx.reference is not None else None
            for row, tok in enumerate(allowed):
                if V.kind(tok) != "item":
                    continue
                item = V.items[tok]
                psi[row, : lay.bil] = np.outer(self.item_vectors[tok], prof).ravel()
                if item in scores:
                    psi[row, lay.bil] = 1.0
                    psi[row, lay.bil + 1] = scores[item]
                psi[row, lay.bil + 2] = 1.0 if item in cands else 0.0
                psi[row, lay.bil + 3] = 1.0 if item == ref_item else 0.0
        return np.asarray(allowed), psi

    def _user_table(self, ctx: Context, prefix: Sequence[int]):
        V = self.vocab
        lay = self.layout
        step = len(prefix)
        ref = ctx.reference.reference_user if ctx.reference is not None else None
        if self.masked:
            if step == 0:
                acts = ctx.allowed_actions or ACTIONS
                allowed = [V.action_token(a) for a in acts]
            elif step == 1:
                if V.kind(prefix[0]) != "action":
                    raise UsageError("user sequence must start with an action token")
                action = ACTIONS[prefix[0] - V.action_offset]
                allowed = [V.bucket_token(b) for b in BUCKETS_FOR_ACTION[action]]
            else:
                allowed = [V.end]
        else:
            allowed = list(range(V.size))
        psi = np.zeros((len(allowed), lay.user_size))
        if self.masked and step == 2:
            return np.asarray(allowed), psi
        bil = np.outer(self._item_vec(ctx.rec_message.item), self.profile(ctx)).ravel()
        q = ctx.peer.similarity if ctx.peer is not None else 0.0
        ref_bucket = bucket_for(ref.action, ref.score) if ref is not None else None
        bucket_base = 4 * lay.action_block
        for row, tok in enumerate(allowed):
            kind = V.kind(tok)
            if kind == "action":
                a = tok - V.action_offset
                base = a * lay.action_block
                psi[row, base : base + lay.bil] = bil
                psi[row, base + lay.bil] = q
                psi[row, base + lay.bil + 1] = 1.0
                psi[row, base + lay.bil + 2] = float(len(ctx.memory))
                if ref is not None and ACTIONS[a] is ref.action:
                    psi[row, lay.user_size - 2] = 1.0
            elif kind == "bucket":
                b = tok - V.bucket_offset
                psi[row, bucket_base + b] = 1.0
                if b == ref_bucket:
                    psi[row, lay.user_size - 1] = 1.0
        return np.asarray(allowed), psi

    def _dist(self, ctx: Context, prefix: Sequence[int]):
        allowed, psi = self.step_table(ctx, prefix)
        logits = psi @ self._params / self.temperature
        logits = logits - logits.max()
        p = np.exp(logits)
        p /= p.sum()
        return allowed, psi, p

    # -- backend contract ---------------------------------------------------

    def generate(self, ctx: Context, rng: np.random.Generator | None = None) -> GenerationResult:
        attempts = 1 if self.masked else max(1, self.max_retries)
        last_err = None
        for _ in range(attempts):
            tokens, logps = [], []
            for _step in range(self._n_steps()):
                allowed, _, p = self._dist(ctx, tokens)
                k = int(np.argmax(p)) if rng is None else int(rng.choice(len(p), p=p))
                tokens.append(int(allowed[k]))
                logps.append(float(np.log(p[k])))
            try:
                decoded = decode_message(tokens, self.role, self.vocab, self._rationale(ctx, tokens))
            except DecodeError as err:
                last_err = err
                continue
            if self.role is Role.REC and decoded.item not in ctx.candidates:
                last_err = DecodeError(f"item {decoded.item} not in candidates")
                continue
            return GenerationResult(tuple(tokens), tuple(logps), decoded)
        raise BackendError(f"toy decode failed after {attempts} attempts: {last_err}")

    def _rationale(self, ctx: Context, tokens) -> str:
        tag = "teacher" if ctx.reference is not None else "student"
        return f"toy:{self.role.value}:{tag}:" + ",".join(self.vocab.name(t) for t in tokens[:-1])

    def logprob(self, ctx: Context, tokens: Sequence) -> list[float]:
        tokens = self.vocab.check(tokens)
        out = []
        for n, tok in enumerate(tokens):
            allowed, _, p = self._dist(ctx, tokens[:n])
            hit = np.flatnonzero(allowed == tok)
            out.append(float(np.log(p[hit[0]])) if hit.size else float("-inf"))
        return out

    def step_distributions(self, ctx: Context, tokens: Sequence) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-step ``(allowed ids, probabilities)`` along ``tokens``."""
        tokens = self.vocab.check(tokens)
        return [self._dist(ctx, tokens[:n])[::2] for n in range(len(tokens))]

    def grad_logprob(self, ctx: Context, tokens: Sequence, weights: Sequence[float]) -> np.ndarray:
        """Gradient of ``sum_n weights[n] * log p(tokens[n] | ctx, tokens[:n])``."""
        tokens = self.vocab.check(tokens)
        if len(weights) != len(tokens):
            raise UsageError("weights and tokens must have equal length")
        g = np.zeros(self.n_params)
        for n, (tok, w) in enumerate(zip(tokens, weights)):
            if w == 0.0:
                continue
            allowed, psi, p = self._dist(ctx, tokens[:n])
            hit = np.flatnonzero(allowed == tok)
            if not hit.size:
                raise UsageError(f"token {tok} has zero probability at step {n}")
            g += w * (psi[hit[0]] - p @ psi)
        return g / self.temperature

    def grad_kl(self, ctx: Context, tokens: Sequence, teacher_dists) -> np.ndarray:
        """Gradient of ``sum_n KL(teacher_n || student_n)`` w.r.t. the student."""
        tokens = self.vocab.check(tokens)
        g = np.zeros(self.n_params)
        for n in range(len(tokens)):
            allowed, psi, p = self._dist(ctx, tokens[:n])
            t_allowed, t_p = teacher_dists[n]
            if not np.array_equal(allowed, t_allowed):
                raise UsageError(f"teacher and student vocabularies differ at step {n}")
            g += (p - t_p) @ psi
        return g / self.temperature
