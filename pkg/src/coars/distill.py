"""Diagnostic references, teacher-mode contexts and token-level credit.

A completed turn is diagnosed against the ground-truth item and rewritten
into a reference: what should have been recommended, how the user should
have reacted, and why. The same policy scored with that reference in its
context acts as the teacher; the clipped teacher-minus-student
log-probability gap on the student's own tokens is the per-token advantage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import (
    ACCEPT_ACTIONS,
    REJECT_ACTIONS,
    InteractionTurn,
    ItemId,
    RecMessage,
    UserMessage,
    is_accept,
    validate_user_message,
)
from .errors import ReferenceConstructionError, UsageError
from .policies.base import Context, Role, rec_context_for, user_context_for


class Verdict(str, enum.Enum):
    CORRECT = "correct"
    WRONG = "wrong"


@dataclass(frozen=True)
class Diagnosis:
    rec_agent: Verdict
    user_agent: Verdict
    outcome: str

    def __str__(self) -> str:
        return (
            f"rec_agent={self.rec_agent.value}, user_agent={self.user_agent.value}, "
            f"outcome={self.outcome}"
        )


def diagnose(turn: InteractionTurn, ground_truth: ItemId) -> Diagnosis:
    """Judge both agents on one turn.

    The recommender is correct iff it proposed the ground truth; the user is
    correct iff it accepted exactly when the proposal was the ground truth.
    """
    hit = turn.rec.item == ground_truth
    accepted = is_accept(turn.user.action)
    rec = Verdict.CORRECT if hit else Verdict.WRONG
    user = Verdict.CORRECT if accepted == hit else Verdict.WRONG
    outcome = f"rec_{rec.value}_user_{'accepted' if accepted else 'rejected'}"
    return Diagnosis(rec, user, outcome)


_EXPLANATIONS = {
    "rec_correct_user_accepted": (
        "The recommendation matched the target item {gt} and the user accepted it; "
        "keep this reasoning."
    ),
    "rec_correct_user_rejected": (
        "The recommendation {item} was the target item, but the user rejected it; "
        "the user should accept (click or star) a recommendation that matches its preference."
    ),
    "rec_wrong_user_accepted": (
        "The recommendation {item} was not the target item {gt}, yet the user accepted it; "
        "the recommender should propose {gt} and the user should answer skip or dislike "
        "when a recommendation does not match its preference."
    ),
    "rec_wrong_user_rejected": (
        "The recommendation {item} was not the target item {gt} and the user correctly "
        "rejected it; the recommender should propose {gt}."
    ),
}


def _yes_no(m: UserMessage) -> str:
    return "yes" if is_accept(m.action) else "no"


BLOCK_FIELDS = (
    "original_interaction",
    "original_reasoning",
    "observed_feedback",
    "interaction_diagnosis",
    "reference_reasoning",
    "reference_response",
    "reference_explanation",
)


@dataclass(frozen=True)
class DiagnosticReference:
    """A turn rewritten with hindsight.

    ``corrected_user`` is the user's answer to ``corrected_rec`` (the
    ground-truth recommendation); ``reference_user`` is the reaction the
    user should have given to the *original* recommendation. The rec-side
    teacher is guided by ``corrected_rec``, the user-side teacher by
    ``reference_user``.
    """

    original_rec: RecMessage
    original_user: UserMessage
    corrected_rec: RecMessage
    corrected_user: UserMessage
    reference_user: UserMessage
    diagnosis: Diagnosis
    explanation: str

    @property
    def ground_truth(self) -> ItemId:
        return self.corrected_rec.item

    def block(self, role: Role) -> dict[str, str]:
        """The seven reference-block fields, in template order."""
        o_rec, o_user = self.original_rec, self.original_user
        if Role(role) is Role.REC:
            fields = (
                f"recommended {o_rec.item}",
                o_rec.rationale,
                f"action={o_user.action.value}, score={o_user.score:g}, "
                f"binary_decision={_yes_no(o_user)}, reason={o_user.rationale}",
                str(self.diagnosis),
                self.corrected_rec.rationale,
                f"Item: {self.corrected_rec.item}",
                self.explanation,
            )
        else:
            ref = self.reference_user
            side = "click_or_star" if is_accept(ref.action) else "skip_or_dislike"
            hit = o_rec.item == self.ground_truth
            fields = (
                f"judged {o_rec.item}: action={o_user.action.value}, score={o_user.score:g}",
                o_user.rationale,
                f"recommended {o_rec.item} with reason: {o_rec.rationale}; ground-truth target "
                f"item: {self.ground_truth} ({'match' if hit else 'mismatch'})",
                str(self.diagnosis),
                ref.rationale,
                f"{side} (example: {ref.action.value}), score={ref.score:g}, "
                f"binary_decision={_yes_no(ref)}",
                self.explanation,
            )
        return dict(zip(BLOCK_FIELDS, fields))

    def to_json(self, role: Role) -> dict:
        out = {"role": Role(role).value}
        out.update(self.block(role))

        def rec(m):
            return {"item": m.item, "rationale": m.rationale}

        def user(m):
            return {"action": m.action.value, "score": m.score, "rationale": m.rationale}

        out["messages"] = {
            "original_rec": rec(self.original_rec),
            "original_user": user(self.original_user),
            "corrected_rec": rec(self.corrected_rec),
            "corrected_user": user(self.corrected_user),
            "reference_user": user(self.reference_user),
        }
        out["diagnosis"] = {
            "rec_agent": self.diagnosis.rec_agent.value,
            "user_agent": self.diagnosis.user_agent.value,
            "outcome": self.diagnosis.outcome,
        }
        return out

    @classmethod
    def from_json(cls, data: dict) -> "DiagnosticReference":
        m = data["messages"]

        def rec(x):
            return RecMessage(x["item"], x["rationale"])

        def user(x):
            return UserMessage(x["action"], float(x["score"]), x["rationale"])

        dg = data["diagnosis"]
        return cls(
            rec(m["original_rec"]),
            user(m["original_user"]),
            rec(m["corrected_rec"]),
            user(m["corrected_user"]),
            user(m["reference_user"]),
            Diagnosis(Verdict(dg["rec_agent"]), Verdict(dg["user_agent"]), dg["outcome"]),
            data["reference_explanation"],
        )


def build_reference(turn: InteractionTurn, ground_truth: ItemId, rec_policy, user_policy) -> DiagnosticReference:
    """Construct the diagnostic reference for a completed turn.

    The recommender is re-queried on the original context with the
    candidate set narrowed to the ground truth, which regenerates the
    rationale for the corrected item. The user is then asked, with its
    decision restricted to the appropriate side, for its answer to the
    corrected recommendation and for the right reaction to the original one.
    Decoding is greedy so the reference is a deterministic function of the
    turn and the policies.

    Raises
    ------
    ReferenceConstructionError
        If the ground truth is not a candidate or a policy query fails.
    """
    if ground_truth not in turn.candidates:
        raise ReferenceConstructionError(
            f"turn {turn.turn_index}: ground truth {ground_truth} not in candidate set"
        )
    hit = turn.rec.item == ground_truth
    try:
        corrected_rec = rec_policy.generate(rec_context_for(turn, candidates=(ground_truth,))).decoded
        corrected_user = user_policy.generate(
            user_context_for(turn, rec_message=corrected_rec, allowed_actions=ACCEPT_ACTIONS)
        ).decoded
        reference_user = user_policy.generate(
            user_context_for(turn, allowed_actions=ACCEPT_ACTIONS if hit else REJECT_ACTIONS)
        ).decoded
    except Exception as err:  # any backend failure downgrades the turn to reward-only
        raise ReferenceConstructionError(f"turn {turn.turn_index}: {err}") from err
    if corrected_rec.item != ground_truth:
        raise ReferenceConstructionError(
            f"turn {turn.turn_index}: corrected recommendation is {corrected_rec.item}, "
            f"expected {ground_truth}"
        )
    for msg in (corrected_user, reference_user):
        problems = validate_user_message(msg)
        if problems:
            raise ReferenceConstructionError(f"turn {turn.turn_index}: {problems[0]}")
    diagnosis = diagnose(turn, ground_truth)
    explanation = _EXPLANATIONS[diagnosis.outcome].format(item=turn.rec.item, gt=ground_truth)
    return DiagnosticReference(
        turn.rec, turn.user, corrected_rec, corrected_user, reference_user, diagnosis, explanation
    )


def assemble_teacher_context(student_context: Context, d: DiagnosticReference) -> Context:
    """Teacher-mode context: the student context plus the reference block.

    The rendered prompt of the result is the student prompt followed by the
    reference block (see :func:`coars.policies.prompts.render_prompt`).
    """
    return student_context.with_reference(d)


@dataclass(frozen=True)
class TokenCredit:
    tokens: tuple
    student_logps: np.ndarray
    teacher_logps: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return len(self.advantages)


def token_advantages(
    teacher_logps: Sequence[float],
    student_logps: Sequence[float],
    tokens: Sequence | None = None,
) -> TokenCredit:
    """Clipped per-token gap ``clip(teacher - student, -1, 1)``.

    Both log-probability lists must be evaluated on the same
    student-sampled token sequence.
    """
    t = np.asarray(teacher_logps, dtype=float)
    s = np.asarray(student_logps, dtype=float)
    if t.shape != s.shape or t.ndim != 1:
        raise UsageError(f"length mismatch: {t.shape} teacher vs {s.shape} student logps")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
        raise UsageError("log-probabilities must be finite")
    adv = np.clip(t - s, -1.0, 1.0)
    if tokens is None:
        tokens = tuple(range(len(adv)))
    return TokenCredit(tuple(tokens), s, t, adv)
