"""Scripted episodes checked byte-for-byte against committed logs.

Set ``COARS_REGEN_GOLDEN=1`` to rewrite the files after an intended
format change.
"""

import os
from pathlib import Path

import pytest

from coars.cli import render_transcript
from coars.domain import PeerOpinion, TerminatedBy
from coars.orchestrator import EpisodeConfig, run_episode
from coars.policies import ScriptedRecPolicy, ScriptedUserPolicy
from coars.rewards import score_trajectory
from coars.tracelog import append_records, read_log, reward_record, write_trajectories

from conftest import history

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("COARS_REGEN_GOLDEN") == "1"
CANDS = ("A", "B", "C", "D", "E")


class FixedPeers:
    def __init__(self, q):
        self.q = q

    def opinion(self, user, item):
        return PeerOpinion("peer-1", item, "", self.q)


SCENARIOS = {
    # user, ground truth, rec choices, user scores, peer similarity
    "click": ("g-click", "B", {1: "D", 2: "B"}, [0.1, 0.95], 0.5),
    "fallback": ("g-fallback", "B", {1: "A", 2: "B", 3: "C"}, [0.35, 0.72, 0.45], None),
    "tie": ("g-tie", "C", {1: "D", 2: "C", 3: "A"}, [0.45, 0.45, 0.2], -0.5),
    "wrong-accept": ("g-wrong", "E", {1: "A", 2: "E"}, [0.65, 0.92], None),
    "miss": ("g-miss", "E", {1: "A", 2: "B", 3: "C"}, [0.2, 0.3, 0.05], 0.1),
}


def golden_trajectories():
    out = []
    for user, gt, choices, scores, q in SCENARIOS.values():
        rec = ScriptedRecPolicy(choices, rationale=f"pick for {user}")
        usr = ScriptedUserPolicy(scores, rationale="scripted reaction")
        peers = FixedPeers(q) if q is not None else None
        out.append(run_episode(history(user), CANDS, rec, usr, peers, EpisodeConfig(max_turns=3), gt))
    return out


def check_or_write(path, text):
    if REGEN:
        path.write_text(text, encoding="utf-8")
    assert path.read_bytes() == text.encode("utf-8")


@pytest.fixture
def scored_log(tmp_path):
    trajs = golden_trajectories()
    log = tmp_path / "trajectories.jsonl"
    write_trajectories(log, trajs)
    check_or_write(GOLDEN / "trajectories.jsonl", log.read_text(encoding="utf-8"))
    append_records(log, [reward_record(t.user, br) for t in trajs for br in score_trajectory(t)])
    check_or_write(GOLDEN / "scored.jsonl", log.read_text(encoding="utf-8"))
    return log


def test_episode_semantics():
    click, fallback, tie, wrong, miss = golden_trajectories()
    assert (click.terminated_by, click.final_item, len(click)) == (TerminatedBy.CLICK, "B", 2)
    assert (fallback.terminated_by, fallback.final_item) == (TerminatedBy.MAX_TURNS_FALLBACK, "B")
    assert tie.final_item == "D"  # earliest of the tied 0.45 turns
    assert wrong.final_item == "E" and wrong.terminated_by is TerminatedBy.CLICK
    assert [br.rl_eligible for br in score_trajectory(wrong)] == [False, True]
    assert miss.final_item == "B" and miss.ground_truth not in [t.rec.item for t in miss.turns]
    assert [br.depth_factor for br in score_trajectory(miss)] == pytest.approx([1.0, 1.2, 1.44])


def test_trajectory_logs_match_golden(scored_log):
    trajs, rewards = read_log(scored_log)
    assert [t.user for t in trajs] == [s[0] for s in SCENARIOS.values()]
    assert len(rewards) == sum(len(t) for t in trajs)


def test_replay_transcript_matches_golden(scored_log):
    check_or_write(GOLDEN / "transcript.txt", render_transcript(scored_log))
    assert render_transcript(GOLDEN / "scored.jsonl") == (GOLDEN / "transcript.txt").read_text(encoding="utf-8")
