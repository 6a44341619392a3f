import numpy as np
import pytest

from coars.domain import (
    Action,
    InteractionTurn,
    Memory,
    PeerOpinion,
    RecMessage,
    UserHistory,
    UserMessage,
)

CANDS = ("A", "B", "C", "D")


def history(user="u1", items=("h1", "h2", "h3")):
    return UserHistory(user, tuple((i, k) for k, i in enumerate(items, 1)))


def turn(t, item, action, score, candidates=CANDS, hist=None, memory=None, q=None, user="u1"):
    peer = PeerOpinion("p1", item, "", q) if q is not None else None
    return InteractionTurn(
        t,
        hist or history(user),
        tuple(candidates),
        memory if memory is not None else Memory(),
        RecMessage(item, f"why {item}"),
        UserMessage(Action(action), score, f"feel {score}"),
        peer,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_world():
    from coars.world import make_synthetic_world

    return make_synthetic_world(seed=3, n_users=40, emb_epochs=30)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
