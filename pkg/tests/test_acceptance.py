"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The summary lines are collected in ``RESULTS`` and printed by the
``pytest_terminal_summary`` hook in ``conftest.py``; run with ``-s`` to see
them inline as well.
"""

import json
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np

from coars import cli
from coars.config import RunConfig
from coars.distill import BLOCK_FIELDS, assemble_teacher_context, build_reference, diagnose, token_advantages
from coars.domain import TerminatedBy
from coars.objective import (
    BatchBuilder,
    ObjectiveConfig,
    TeacherMode,
    direct_sd_loss,
    objective_value,
    policy_gradient,
    rl_objective,
    update_teacher,
)
from coars.policies.base import Role, rec_context_for, user_context_for
from coars.policies.prompts import REFERENCE_LABELS, render_prompt
from coars.rewards import RewardBreakdown, RewardConfig, rec_reward, user_reward
from coars.training import ABLATIONS, ablation_config, train
from coars.world import make_synthetic_world

from batches import random_batch, toy_pair
from oracles import central_difference, kl_oracle, rec_reward_oracle, user_reward_oracle

RESULTS = []

SEEDS = (7, 8, 9)
HIT_GAIN = 0.25
F1_GAIN = 0.15
ABLATION_MARGIN = 0.02


@contextmanager
def criterion(number, title, budget_s):
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as err:
        elapsed = time.perf_counter() - start
        line = f"criterion {number:2d} FAIL  {title} ({elapsed:.1f}s): {err}"
        RESULTS.append(line)
        print("\n" + line)
        raise
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    line = f"criterion {number:2d} PASS  {title} ({elapsed:.1f}s) {extra}".rstrip()
    RESULTS.append(line)
    print("\n" + line)


# Case-by-case user-reward table: hit, accept, peer sign, reward sign,
# and whether the peer term raises (+1) or lowers (-1) the reward relative to q = 0.
USER_REWARD_TABLE = [
    (1, True, +1, +1, -1),
    (1, True, -1, +1, +1),
    (0, True, +1, -1, +1),
    (0, True, -1, -1, -1),
    (1, False, +1, -1, -1),
    (1, False, -1, -1, +1),
    (0, False, +1, +1, +1),
    (0, False, -1, +1, -1),
]


def test_criterion_01_reward_table():
    with criterion(1, "reward table conformance", 1.0) as d:
        rows = 0
        for hit, accept, peer, sign, effect in USER_REWARD_TABLE:
            s = 0.9 if accept else 0.1
            q = 0.5 * peer
            r, r0 = user_reward(hit, s, q), user_reward(hit, s, 0.0)
            assert np.sign(r) == sign, (hit, s, q)
            assert np.sign(r - r0) == effect, (hit, s, q)
            rows += 1
        d["rows"] = rows


def test_criterion_02_formula_oracles():
    with criterion(2, "formula oracles on 10,000 inputs", 1.0) as d:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(10_000):
            hit = bool(rng.integers(2))
            s, q, alpha = rng.uniform(0, 1), rng.uniform(-1, 1), rng.uniform(0, 1)
            D = 1.2 ** int(rng.integers(0, 5))
            worst = max(
                worst,
                abs(rec_reward(hit, s, D) - rec_reward_oracle(hit, s, D)),
                abs(user_reward(hit, s, q, RewardConfig(alpha)) - user_reward_oracle(hit, s, q, alpha)),
            )
        assert worst <= 1e-12
        d["max_abs_err"] = f"{worst:.1e}"


def test_criterion_03_clip_and_reduction():
    with criterion(3, "clip range and lambda=0 reduction", 5.0) as d:
        rng = np.random.default_rng(3)
        t = rng.uniform(-20, 0, 10_000)
        s = rng.uniform(-20, 0, 10_000)
        adv = token_advantages(t, s).advantages
        assert np.all((adv >= -1) & (adv <= 1))
        assert np.array_equal(adv, np.clip(t - s, -1, 1))
        cfg = ObjectiveConfig(lambda_rec=0.0, lambda_user=0.0)
        worst, checked = 0.0, 0
        for _ in range(100):
            batch, _, _ = random_batch(rng, n_episodes=3)
            for role in Role:
                part = batch.for_role(role)
                if len(part):
                    worst = max(worst, abs(objective_value(part, role, cfg) - rl_objective(part, role)))
                    checked += 1
        assert checked >= 100 and worst <= 1e-12
        d["batches"] = checked


def _rel_err(a, n, floor=1e-6):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def test_criterion_04_gradient_check():
    with criterion(4, "analytic vs finite-difference gradient", 30.0) as d:
        rng = np.random.default_rng(4)
        obj = ObjectiveConfig(lambda_rec=0.3, lambda_user=0.3)
        worst, batches, n_params = 0.0, 0, 0
        while batches < 20:
            rec, user = toy_pair(rng, d=8)
            batch, rec, user = random_batch(rng, n_episodes=2, objective=obj, rec=rec, user=user)
            for role, pol in ((Role.REC, rec), (Role.USER, user)):
                part = batch.for_role(role)
                if not len(part):
                    continue
                assert pol.n_params <= 500
                g = policy_gradient(part, pol, role, obj)
                f = lambda th: objective_value(part, role, obj, pol.with_params(np.array(th)))
                num = np.array(central_difference(f, list(pol.params), 1e-5))
                worst = max(worst, float(_rel_err(g, num).max()))
                n_params = max(n_params, pol.n_params)
            batches += 1
        assert worst <= 1e-4
        d["batches"] = batches
        d["max_params"] = n_params
        d["max_rel_err"] = f"{worst:.1e}"


def test_criterion_05_exclusion_rule():
    with criterion(5, "excluded turns leave J and gradients unchanged", 5.0) as d:
        rng = np.random.default_rng(5)
        cfg = ObjectiveConfig()
        batch, rec, user = random_batch(rng, n_episodes=4, objective=cfg)
        injected = BatchBuilder()
        clean = BatchBuilder()
        for s in batch.samples:
            clean.add(s)
            injected.add(s)
        for k, s in enumerate(batch.samples[:6]):
            for action in ("click", "star"):
                br = RewardBreakdown(90 + k, False, 0.9 if action == "click" else 0.7, 1.0, 0.0, -0.9, -0.8, False)
                assert not injected.add(replace(s, reward=br, episode=s.episode if k % 2 else ("new", k)))
        a, b = clean.build(), injected.build()
        for role, pol in ((Role.REC, rec), (Role.USER, user)):
            pa, pb = a.for_role(role), b.for_role(role)
            assert objective_value(pa, role, cfg) - objective_value(pb, role, cfg) == 0.0
            assert np.array_equal(policy_gradient(pa, pol, role, cfg), policy_gradient(pb, pol, role, cfg))
        assert b.excluded_turns > a.excluded_turns
        d["excluded_turn_fraction"] = f"{b.excluded_turn_fraction:.3f}"


def _train_toy(tmp_path, seed, capsys):
    cfg_path = tmp_path / f"seed{seed}.cfg"
    RunConfig(seed=seed, out_dir=str(tmp_path / "runs")).save(cfg_path)
    assert cli.main(["train-toy", str(cfg_path), "--name", f"seed{seed}"]) == 0
    capsys.readouterr()
    return json.loads((tmp_path / "runs" / f"seed{seed}.json").read_text())


def test_criterion_06_end_to_end(tmp_path, capsys):
    with criterion(6, "end-to-end co-evolution on the synthetic world", 300.0) as d:
        gains = {}
        for seed in SEEDS:
            report = _train_toy(tmp_path, seed, capsys)
            base, final = report["baseline"], report["epochs"][-1]
            assert final["epoch"] == 200
            gains[seed] = (
                final["holdout_hit_at_1"] - base["holdout_hit_at_1"],
                final["holdout_user_f1"] - base["holdout_user_f1"],
            )
        for seed, (dh, df) in gains.items():
            d[f"seed{seed}"] = f"dHit={dh:+.3f},dF1={df:+.3f}"
        for seed, (dh, df) in gains.items():
            assert dh >= HIT_GAIN and df >= F1_GAIN, f"seed {seed}: dHit={dh:.3f} dF1={df:.3f}"


ABLATION_ROLLOUTS = 4


def test_criterion_07_ablation_ordering():
    with criterion(7, "ablation ordering", 1200.0) as d:
        base_cfg = cli.train_config(RunConfig(eval_every=200, eval_rollouts=ABLATION_ROLLOUTS))
        hits = {v: [] for v in ("full", *ABLATIONS)}
        for seed in SEEDS:
            world = make_synthetic_world(seed)
            cfg = replace(base_cfg, seed=seed)
            for v in hits:
                result = train(world, cfg if v == "full" else ablation_config(cfg, v))
                hits[v].append(result.final["holdout_hit_at_1"])
        mean = {v: float(np.mean(h)) for v, h in hits.items()}
        d.update({v: f"{m:.3f}" for v, m in mean.items()})
        for v in ABLATIONS:
            assert mean["full"] >= mean[v], f"full {mean['full']:.3f} < {v} {mean[v]:.3f}"
        ir_deficit = mean["full"] - mean["ir-rec"]
        sd_deficit = mean["full"] - mean["sd-rec"]
        assert ir_deficit - sd_deficit >= ABLATION_MARGIN, (ir_deficit, sd_deficit)


def test_criterion_08_teacher_modes():
    with criterion(8, "fixed and EMA teachers", 10.0) as d:
        world = make_synthetic_world(7, emb_epochs=40)
        cfg = cli.train_config(RunConfig(seed=7, epochs=20, eval_every=20))
        for mode in TeacherMode:
            result = train(world, replace(cfg, objective=replace(cfg.objective, teacher_mode=mode)))
            assert len(result.epochs) == 20
            assert np.all(np.isfinite(result.rec_policy.params)) and np.all(np.isfinite(result.user_policy.params))
            d[mode.value] = f"hit={result.final['holdout_hit_at_1']:.3f}"
        ema = ObjectiveConfig(teacher_mode="ema", ema_rate=0.05)
        rng = np.random.default_rng(8)
        student = rng.normal(size=280)
        teacher = student + rng.normal(size=280)
        gap0 = np.abs(teacher - student).max()
        for k in range(1, 501):
            prev = teacher - student
            teacher = update_teacher(teacher, student, ema)
            assert np.allclose(teacher - student, 0.95 * prev, rtol=1e-12, atol=1e-15)
        assert np.abs(teacher - student).max() <= 1e-10 * max(gap0, 1.0)
        d["gap_after_500"] = f"{np.abs(teacher - student).max():.1e}"


def test_criterion_09_direct_sd():
    with criterion(9, "direct-SD variant", 60.0) as d:
        world = make_synthetic_world(7)
        cfg = cli.train_config(RunConfig(seed=7, loss_variant="direct_sd", eval_every=200))
        result = train(world, cfg)
        assert len(result.epochs) == 200 and result.final is not None
        d["hit"] = f"{result.final['holdout_hit_at_1']:.3f}"
        rng = np.random.default_rng(9)
        for _ in range(10_000):
            n = int(rng.integers(2, 30))
            p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
            kl = direct_sd_loss([p], [q])
            assert kl >= 0.0 and abs(kl - kl_oracle(p, q)) <= 1e-10
            assert direct_sd_loss([p], [p]) == 0.0


def test_criterion_10_protocol_golden(tmp_path):
    from test_golden import GOLDEN, golden_trajectories
    from coars.rewards import score_trajectory
    from coars.tracelog import append_records, reward_record, write_trajectories

    with criterion(10, "golden trajectory logs", 1.0) as d:
        trajs = golden_trajectories()
        log = tmp_path / "t.jsonl"
        write_trajectories(log, trajs)
        assert log.read_bytes() == (GOLDEN / "trajectories.jsonl").read_bytes()
        append_records(log, [reward_record(t.user, br) for t in trajs for br in score_trajectory(t)])
        assert log.read_bytes() == (GOLDEN / "scored.jsonl").read_bytes()
        assert cli.render_transcript(log).encode("utf-8") == (GOLDEN / "transcript.txt").read_bytes()
        by_user = {t.user: t for t in trajs}
        fb, tie = by_user["g-fallback"], by_user["g-tie"]
        assert fb.terminated_by is TerminatedBy.MAX_TURNS_FALLBACK and fb.final_item == "B"
        assert tie.turns[0].user.score == tie.turns[1].user.score and tie.final_item == tie.turns[0].rec.item
        d["files"] = 3


def test_criterion_11_reference_construction():
    from test_distill import load_case_study, scripted_pair

    with criterion(11, "case-study reference construction", 1.0) as d:
        turns, gt = load_case_study()
        wrong = turns[1]
        diag = diagnose(wrong, gt)
        assert (diag.rec_agent.value, diag.user_agent.value, diag.outcome) == ("wrong", "wrong", "rec_wrong_user_accepted")
        ref = build_reference(wrong, gt, *scripted_pair())
        for ctx in (rec_context_for(wrong), user_context_for(wrong)):
            text = render_prompt(assemble_teacher_context(ctx, ref))
            block = text[text.index("[Reference Trajectory]"):]
            positions = [block.index(f"\n{label}: ") for _, label in REFERENCE_LABELS]
            assert positions == sorted(positions) and len(positions) == len(BLOCK_FIELDS) == 7
        d["outcome"] = diag.outcome
