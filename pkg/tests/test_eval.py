import numpy as np
import pytest
from hypothesis import given, strategies as st

from coars.domain import Action, GenerationResult, UserHistory, UserMessage
from coars.errors import DomainError, UsageError
from coars.evaluation import (
    UserSimCase,
    hit_at_1,
    mean_hit_at_1,
    run_rec_eval,
    run_user_sim_eval,
    topk_distractors,
    user_sim_f1,
    user_sim_stats,
)
from coars.orchestrator import EpisodeConfig
from coars.policies import ScriptedRecPolicy, ScriptedUserPolicy
from coars.recsys import EmbeddingTable

ACCEPT, REJECT = (Action.CLICK, 0.9), (Action.DISLIKE, 0.1)


def case(gt_accept, distractor_accepts):
    ds = ("d1", "d2", "d3")
    dec = {"gt": ACCEPT if gt_accept else REJECT}
    dec.update({d: ACCEPT if a else REJECT for d, a in zip(ds, distractor_accepts)})
    return UserSimCase("gt", ds, dec)


class CoinFlipUser:
    """Accepts with probability 1/2, independent of the item."""

    def generate(self, ctx, rng=None):
        accept = rng.random() < 0.5
        msg = UserMessage(Action.STAR if accept else Action.SKIP, 0.6 if accept else 0.4, "")
        return GenerationResult(("x",), (0.0,), msg)

    def logprob(self, ctx, tokens):
        return [0.0] * len(tokens)


def sim_world(n):
    users = [f"u{k}" for k in range(n)]
    hist = {u: UserHistory(u, (("h", 1),)) for u in users}
    gt = {u: "gt" for u in users}
    ds = {u: ("d1", "d2", "d3") for u in users}
    return hist, gt, ds


def test_hit_at_1():
    assert hit_at_1("A", "A") == 1 and hit_at_1("A", "B") == 0


def test_case_validation():
    with pytest.raises(DomainError):
        UserSimCase("gt", ("d1", "d2"), {})
    with pytest.raises(DomainError):
        UserSimCase("gt", ("gt", "d2", "d3"), {})
    with pytest.raises(DomainError):
        UserSimCase("gt", ("d1", "d2", "d3"), {"gt": ACCEPT})


def test_f1_examples():
    assert user_sim_f1([case(True, (0, 0, 0))] * 5) == 1.0
    stats = user_sim_stats([case(True, (1, 0, 0))])
    assert (stats.precision, stats.recall) == (0.5, 1.0)
    assert stats.f1 == pytest.approx(2 / 3)
    assert user_sim_f1([case(False, (0, 0, 0))] * 3) == 0.0
    with pytest.raises(UsageError):
        user_sim_f1([])


@given(st.lists(st.tuples(st.booleans(), st.tuples(st.booleans(), st.booleans(), st.booleans())), min_size=1, max_size=30))
def test_f1_bounds(rows):
    cases = [case(g, d) for g, d in rows]
    f1 = user_sim_f1(cases)
    assert 0.0 <= f1 <= 1.0
    perfect = all(g and not any(d) for g, d in rows)
    assert (f1 == 1.0) == perfect


def test_oracle_scores_perfectly():
    hist, gt, ds = sim_world(20)
    report = run_user_sim_eval(ScriptedUserPolicy.oracle(gt), hist, gt, distractors=ds)
    assert report.f1 == 1.0 and report.n_cases == 20


def test_always_accept():
    hist, gt, ds = sim_world(20)
    report = run_user_sim_eval(ScriptedUserPolicy.constant(Action.CLICK, 0.9), hist, gt, distractors=ds)
    assert report.precision == 0.25 and report.recall == 1.0
    assert report.f1 == pytest.approx(0.4)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_coin_flip_matches_analytic_value(seed):
    # P = 1/4 and R = 1/2 in expectation, so F1 = 1/3
    hist, gt, ds = sim_world(1000)
    report = run_user_sim_eval(CoinFlipUser(), hist, gt, seed=seed, distractors=ds)
    assert abs(report.f1 - 1 / 3) <= 0.05


def test_distractors_from_embeddings_exclude_gt():
    items = ["gt", "a", "b", "c", "h"]
    emb = EmbeddingTable(["u0"], items, [[1.0, 0.0]], [[5, 0], [4, 0], [3, 0], [2, 0], [9, 0]])
    hist = UserHistory("u0", (("h", 1),))
    assert topk_distractors(hist, "gt", emb) == ("a", "b", "c")
    report = run_user_sim_eval(ScriptedUserPolicy.oracle({"u0": "gt"}), {"u0": hist}, {"u0": "gt"}, emb=emb)
    case_ = report.per_case[0]
    assert set(case_["decisions"]) == {"gt", "a", "b", "c"}
    assert report.to_json(detail=False)["per_case"] is None


def test_rec_eval_hit_rate_and_order_invariance():
    users = [f"u{k}" for k in range(6)]
    hist = {u: UserHistory(u, (("h", 1),)) for u in users}
    gt = {u: ("A" if k % 2 else "B") for k, u in enumerate(users)}
    cands = {u: ("A", "B", "C") for u in users}
    rec = ScriptedRecPolicy({1: "A"})
    user = ScriptedUserPolicy.constant(Action.SKIP, 0.4)
    cfg = EpisodeConfig(max_turns=1)
    report, trajs = run_rec_eval(rec, user, hist, gt, cands, cfg=cfg, greedy=True)
    assert report.hit_at_1 == 0.5 == mean_hit_at_1(trajs)
    assert mean_hit_at_1(list(reversed(trajs))) == mean_hit_at_1(trajs)
    shuffled, _ = run_rec_eval(rec, user, hist, gt, cands, cfg=cfg, greedy=True, users=users[::-1], workers=3)
    assert shuffled.hit_at_1 == report.hit_at_1
    assert np.mean([c["hit"] for c in report.per_case]) == report.hit_at_1
