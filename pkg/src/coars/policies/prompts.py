"""Text rendering of contexts for LLM backends, and parsing of replies.

Student prompts carry the task, the output format, the user's history, the
candidate list, the interaction memory and the current request. Teacher
prompts are the student prompt followed by the reference block and two
closing instructions, so the student prompt is always a verbatim prefix.
"""

from __future__ import annotations

import re

from ..domain import Action, RecMessage, UserMessage, validate_user_message
from ..errors import DecodeError
from .base import Context, Role

REC_TASK = (
    "You are a recommender. From the user's interaction history, choose the item "
    "they are most likely to interact with next from the candidate list. Earlier "
    "recommendations may have been turned down; take that feedback into account."
)
REC_FORMAT = (
    "Rules:\n"
    "1. Give your reasoning first, then the item.\n"
    "2. The item must be taken from the candidate list.\n"
    "Output format:\n"
    "Reason: <reasoning>\n"
    "Item: <item>"
)
USER_TASK = (
    "You are simulating the user described by the history below. Decide whether the "
    "newly recommended item is your preferred choice among the candidates."
)
USER_FORMAT = (
    "Choose one decision from click, star, skip, dislike and a strength in [0, 1] "
    "consistent with it: click (0.8, 1.0], star (0.5, 0.8], skip (0.3, 0.5], dislike [0, 0.3].\n"
    "Output format:\n"
    "Reason: <reasoning>\n"
    "Decision: <decision>\n"
    "Strength: <strength>"
)

REFERENCE_LABELS = (
    ("original_interaction", "Original interaction"),
    ("original_reasoning", "Original reasoning"),
    ("observed_feedback", "Observed feedback"),
    ("interaction_diagnosis", "Interaction diagnosis"),
    ("reference_reasoning", "Reference reasoning"),
    ("reference_response", "Reference response"),
    ("reference_explanation", "Reference explanation"),
)
REFERENCE_INSTRUCTIONS = (
    "Instruction: use the reference trajectory as additional context.",
    "Instruction: after the reference block, continue with the same task and output "
    "format as the original prompt.",
)


def _memory_lines(ctx: Context) -> list[str]:
    if not ctx.memory.records:
        return ["(none yet)"]
    lines = []
    for k, (rec, user) in enumerate(ctx.memory.records, 1):
        lines.append(f"Round {k}: recommended {rec.item}. Recommendation reason: {rec.rationale}")
        lines.append(
            f"Round {k}: user decision {user.action.value} ({user.score:g}). "
            f"User reason: {user.rationale}"
        )
    return lines


def render_student(ctx: Context) -> str:
    history = ", ".join(ctx.history.items) or "(empty)"
    candidates = ", ".join(ctx.candidates)
    if ctx.role is Role.REC:
        parts = [
            REC_TASK,
            REC_FORMAT,
            f"History: the user has interacted with {history}.",
            f"Candidates: {candidates}.",
            "Previous recommendations and feedback:",
            *_memory_lines(ctx),
            "Recommend one item from the candidates.",
        ]
    else:
        rec = ctx.rec_message
        parts = [
            USER_TASK,
            USER_FORMAT,
            f"History: you have interacted with {history}.",
            f"Candidates: {candidates}.",
            "Previous recommendations and your feedback:",
            *_memory_lines(ctx),
            f"New recommendation: {rec.item}.",
            f"Recommendation reason: {rec.rationale}",
        ]
        if ctx.peer is not None and ctx.peer.text:
            parts.append(f"Another user who interacted with this item says: {ctx.peer.text}")
        if ctx.allowed_actions is not None:
            names = " or ".join(a.value for a in ctx.allowed_actions)
            parts.append(f"Answer with {names}.")
        parts.append("Is the newly recommended item your preferred one among the candidates?")
    return "\n".join(parts)


def render_reference_block(ctx: Context) -> str:
    block = ctx.reference.block(ctx.role)
    lines = ["[Reference Trajectory]"]
    lines += [f"{label}: {block[key]}" for key, label in REFERENCE_LABELS]
    lines.append("")
    lines += REFERENCE_INSTRUCTIONS
    return "\n".join(lines)


def render_prompt(ctx: Context) -> str:
    student = render_student(ctx)
    if ctx.reference is None:
        return student
    return student + "\n\n" + render_reference_block(ctx)


_FIELD = re.compile(r"^\s*(Reason|Item|Decision|Strength)\s*:\s*(.*?)\s*$", re.IGNORECASE | re.MULTILINE)


def parse_reply(text: str, ctx: Context) -> RecMessage | UserMessage:
    """Parse a ``Reason/Item`` or ``Reason/Decision/Strength`` completion."""
    fields = {k.lower(): v for k, v in _FIELD.findall(text)}
    reason = fields.get("reason", "")
    if ctx.role is Role.REC:
        item = fields.get("item")
        if item is None:
            raise DecodeError("reply has no 'Item:' line")
        if item not in ctx.candidates:
            raise DecodeError(f"item {item!r} not in candidate list")
        return RecMessage(item, reason)
    try:
        action = Action(fields["decision"].strip().lower())
        score = float(fields["strength"])
    except (KeyError, ValueError) as err:
        raise DecodeError(f"unparseable decision/strength: {err}") from err
    msg = UserMessage(action, score, reason)
    problems = validate_user_message(msg)
    if problems:
        raise DecodeError(problems[0])
    if ctx.allowed_actions is not None and action not in ctx.allowed_actions:
        raise DecodeError(f"decision {action.value} not allowed here")
    return msg


def reply_text(msg: RecMessage | UserMessage) -> str:
    if isinstance(msg, RecMessage):
        return f"Reason: {msg.rationale}\nItem: {msg.item}"
    return f"Reason: {msg.rationale}\nDecision: {msg.action.value}\nStrength: {msg.score:g}"

