"""Deterministic point-mass policies for protocol tests and replays."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

from ..domain import (
    ACCEPT_ACTIONS,
    Action,
    GenerationResult,
    ItemId,
    RecMessage,
    UserMessage,
    score_to_action,
)
from ..errors import UsageError
from .base import Context, Role

END = "<end>"

# Canonical reactions used when a scripted rule is overridden by a
# direction constraint.
_CANONICAL = {True: (Action.CLICK, 0.95), False: (Action.DISLIKE, 0.1)}


def _check_tokens(tokens: Sequence) -> None:
    for tok in tokens:
        if not isinstance(tok, str) or not (tok == END or ":" in tok):
            raise UsageError(f"unknown token {tok!r}")


def _point_mass_logprob(policy, ctx: Context, tokens: Sequence) -> list[float]:
    _check_tokens(tokens)
    own = policy.generate(ctx).tokens
    out = []
    for k, tok in enumerate(tokens):
        out.append(0.0 if k < len(own) and own[k] == tok else float("-inf"))
    return out


class ScriptedRecPolicy:
    """Recommends a fixed item per turn.

    ``choose`` is either a turn -> item table or a callable on the context.
    Turns missing from a table fall back to the first candidate. When the
    context offers exactly one candidate, that candidate is returned, which
    is how reference construction constrains the recommendation.
    """

    thread_safe = True

    def __init__(
        self,
        choose: Mapping[int, ItemId] | Callable[[Context], ItemId],
        rationale: str = "scripted",
    ):
        self.choose = choose
        self.rationale = rationale

    def _pick(self, ctx: Context) -> ItemId:
        if len(ctx.candidates) == 1:
            return ctx.candidates[0]
        if callable(self.choose):
            return self.choose(ctx)
        return self.choose.get(ctx.turn_index, ctx.candidates[0])

    def generate(self, ctx: Context, rng=None) -> GenerationResult:
        if ctx.role is not Role.REC:
            raise UsageError("ScriptedRecPolicy only serves the rec role")
        item = self._pick(ctx)
        rationale = self.rationale
        if ctx.reference is not None:
            rationale = f"{rationale} (reference: {ctx.reference.corrected_rec.item})"
        msg = RecMessage(item, rationale)
        return GenerationResult((f"item:{item}", END), (0.0, 0.0), msg)

    def logprob(self, ctx: Context, tokens: Sequence) -> list[float]:
        return _point_mass_logprob(self, ctx, tokens)


class ScriptedUserPolicy:
    """Answers with a fixed (action, score) rule.

    ``rule`` maps the context to ``(action, score)``; a turn -> score table
    or a plain score list are accepted as shorthands, with the action
    derived from the score interval.
    """

    thread_safe = True

    def __init__(
        self,
        rule: Callable[[Context], tuple[Action, float]] | Mapping[int, float] | Sequence[float],
        rationale: str = "scripted",
    ):
        if callable(rule):
            self._rule = rule
        else:
            table = dict(rule) if isinstance(rule, Mapping) else {
                k + 1: s for k, s in enumerate(rule)
            }

            def _from_table(ctx, table=table):
                s = table[ctx.turn_index]
                return score_to_action(s), s

            self._rule = _from_table
        self.rationale = rationale

    @classmethod
    def constant(cls, action: Action, score: float) -> "ScriptedUserPolicy":
        return cls(lambda ctx: (Action(action), score))

    @classmethod
    def oracle(cls, ground_truth: Mapping[str, ItemId]) -> "ScriptedUserPolicy":
        """Clicks exactly the ground-truth item of each user."""

        def rule(ctx):
            return _CANONICAL[ctx.rec_message.item == ground_truth[ctx.history.user]]

        return cls(rule, rationale="oracle")

    def generate(self, ctx: Context, rng=None) -> GenerationResult:
        if ctx.role is not Role.USER:
            raise UsageError("ScriptedUserPolicy only serves the user role")
        action, score = self._rule(ctx)
        action = Action(action)
        if ctx.allowed_actions is not None and action not in ctx.allowed_actions:
            action, score = _CANONICAL[ctx.allowed_actions[0] in ACCEPT_ACTIONS]
        msg = UserMessage(action, float(score), self.rationale)
        tokens = (f"action:{action.value}", f"score:{float(score)!r}", END)
        return GenerationResult(tokens, (0.0, 0.0, 0.0), msg)

    def logprob(self, ctx: Context, tokens: Sequence) -> list[float]:
        return _point_mass_logprob(self, ctx, tokens)
