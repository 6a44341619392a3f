"""Line-delimited JSON trajectory logs.

One object per turn with the fields ``user, turn, candidates, rec_item,
rec_rationale, action, score, user_rationale, peer_similarity,
terminated_by, final_item, ground_truth``. Reward records are extra lines
tagged ``"record": "reward"`` and keyed by ``(user, turn)``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .domain import (
    InteractionTurn,
    Memory,
    PeerOpinion,
    RecMessage,
    Trajectory,
    UserHistory,
    UserMessage,
)
from .errors import DataError
from .rewards import RewardBreakdown

TURN_FIELDS = (
    "user",
    "turn",
    "candidates",
    "rec_item",
    "rec_rationale",
    "action",
    "score",
    "user_rationale",
    "peer_similarity",
    "terminated_by",
    "final_item",
    "ground_truth",
)


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def trajectory_records(traj: Trajectory) -> list[dict]:
    out = []
    for t in traj.turns:
        out.append(
            {
                "user": traj.user,
                "turn": t.turn_index,
                "candidates": list(t.candidates),
                "rec_item": t.rec.item,
                "rec_rationale": t.rec.rationale,
                "action": t.user.action.value,
                "score": t.user.score,
                "user_rationale": t.user.rationale,
                "peer_similarity": t.peer.similarity if t.peer is not None else None,
                "terminated_by": traj.terminated_by.value,
                "final_item": traj.final_item,
                "ground_truth": traj.ground_truth,
            }
        )
    return out


def reward_record(user: str, br: RewardBreakdown) -> dict:
    rec = {"record": "reward", "user": user, "turn": br.turn_index}
    rec.update({k: v for k, v in br.to_json().items() if k != "turn_index"})
    return rec


def format_lines(records: Iterable[dict]) -> str:
    return "".join(_dumps(r) + "\n" for r in records)


def write_trajectories(path: str | Path, trajs: Iterable[Trajectory]) -> None:
    Path(path).write_text(
        format_lines(r for traj in trajs for r in trajectory_records(traj)), encoding="utf-8"
    )


def append_records(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(format_lines(records))


def iter_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"invalid JSON: {err.msg}", lineno) from err


def read_log(
    path: str | Path, histories: Mapping[str, UserHistory] | None = None
) -> tuple[list[Trajectory], dict[tuple[str, int], RewardBreakdown]]:
    """Parse a trajectory log back into trajectories and reward records.

    Histories are not part of the log; pass ``histories`` to restore them,
    otherwise turns carry an empty history. Memory is rebuilt from the
    preceding turns.
    """
    rows: dict[str, list[dict]] = {}
    rewards: dict[tuple[str, int], RewardBreakdown] = {}
    for lineno, obj in iter_lines(path):
        if obj.get("record") == "reward":
            try:
                br = RewardBreakdown(
                    turn_index=obj["turn"],
                    **{k: obj[k] for k in RewardBreakdown.__dataclass_fields__ if k != "turn_index"},
                )
            except (KeyError, TypeError) as err:
                raise DataError(f"bad reward record: {err}", lineno) from err
            rewards[(obj["user"], obj["turn"])] = br
            continue
        missing = [f for f in TURN_FIELDS if f not in obj]
        if missing:
            raise DataError(f"missing fields {missing}", lineno)
        rows.setdefault(obj["user"], []).append(obj)
    trajs = []
    for user, lines in rows.items():
        history = (histories or {}).get(user) or UserHistory(user)
        memory = Memory()
        turns = []
        for obj in sorted(lines, key=lambda o: o["turn"]):
            rec = RecMessage(obj["rec_item"], obj["rec_rationale"])
            msg = UserMessage(obj["action"], float(obj["score"]), obj["user_rationale"])
            peer = None
            if obj["peer_similarity"] is not None:
                peer = PeerOpinion(None, obj["rec_item"], "", float(obj["peer_similarity"]))
            turns.append(
                InteractionTurn(obj["turn"], history, obj["candidates"], memory, rec, msg, peer)
            )
            memory = memory.append(rec, msg)
        last = lines[-1]
        trajs.append(
            Trajectory(user, tuple(turns), last["final_item"], last["terminated_by"], last["ground_truth"])
        )
    return trajs, rewards
