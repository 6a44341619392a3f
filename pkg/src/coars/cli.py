"""``coars`` command line.

Every failure prints one JSON line ``{"error": ..., "message": ..., "exit": ...}``
on stderr and exits 1 (usage), 2 (data) or 3 (backend/transport).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .distill import diagnose
from .errors import CoarsError, DataError, UsageError
from .evaluation import run_rec_eval, run_user_sim_eval
from .orchestrator import run_episodes
from .policies import RemotePolicy, Role, ScriptedRecPolicy, ScriptedUserPolicy, ToyPolicy, Vocabulary
from .recsys import build_candidates, chronological_split, ingest, train_embeddings, EmbeddingTable
from .rewards import score_trajectory
from .tracelog import append_records, read_log, reward_record, write_trajectories
from .training import ABLATIONS, TrainConfig, ablation_config, config_json, train
from .world import World, load_world, make_synthetic_world, write_item_lists

REPORT_FIELDS = (
    "epoch",
    "mean_rec_reward",
    "mean_user_reward",
    "J_rec",
    "J_user",
    "holdout_hit_at_1",
    "holdout_user_f1",
    "excluded_turn_fraction",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared builders ----------------------------------------------------------


def build_world(cfg: RunConfig) -> World:
    if cfg.world == "synthetic":
        return make_synthetic_world(
            seed=cfg.seed,
            n_users=cfg.synthetic_users,
            n_blocks=cfg.synthetic_blocks,
            n_items=cfg.synthetic_items,
            history_len=cfg.synthetic_history,
            n_candidates=cfg.synthetic_candidates,
            holdout_fraction=cfg.holdout_fraction,
            dim=cfg.synthetic_dim,
        )
    return load_world(
        cfg.log_path,
        cfg.embeddings_path,
        cfg.candidates_path,
        cfg.distractors_path,
        cfg.holdout_path,
        k=cfg.k,
        holdout_fraction=cfg.holdout_fraction,
        seed=cfg.seed,
        dim=cfg.embedding_dim,
        emb_epochs=cfg.embedding_epochs,
        emb_lr=cfg.embedding_lr,
    )


def _load_params(path: str | None):
    if path is None:
        return None
    try:
        return np.loadtxt(path, ndmin=1)
    except (OSError, ValueError) as err:
        raise DataError(f"cannot load parameters from {path}: {err}") from None


def build_policy(cfg: RunConfig, role: Role, world: World):
    kind = cfg.rec_backend if role is Role.REC else cfg.user_backend
    if kind == "remote":
        return RemotePolicy(
            cfg.endpoint,
            timeout=cfg.timeout,
            max_tokens=cfg.max_tokens,
            temperature=cfg.temperature,
            max_concurrency=cfg.concurrency,
        )
    if kind == "scripted":
        if role is Role.REC:
            return ScriptedRecPolicy({})
        return ScriptedUserPolicy.oracle(world.ground_truth)
    params = _load_params(cfg.rec_params_path if role is Role.REC else cfg.user_params_path)
    return ToyPolicy(role, Vocabulary(world.items), world.emb.item_vectors, params, ref_weight=cfg.ref_weight)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        episodes_per_epoch=cfg.episodes_per_epoch,
        lr=cfg.lr,
        seed=cfg.seed,
        max_turns=cfg.max_turns,
        max_peers=cfg.max_peers,
        ref_weight=cfg.ref_weight,
        rewards=cfg.reward_config(),
        objective=cfg.objective_config(),
        schedule=cfg.schedule,
        eval_every=cfg.eval_every,
        eval_greedy=cfg.eval_greedy,
        eval_seed=cfg.eval_seed,
        eval_rollouts=cfg.eval_rollouts,
    )


def _episode_users(cfg: RunConfig, world: World):
    if cfg.episode_users == "holdout":
        return world.holdout_users
    if cfg.episode_users == "train":
        return world.train_users
    return tuple(world.ground_truth)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def write_report_csv(path: Path, epochs: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in epochs:
            w.writerow({k: ("" if rec[k] is None else rec[k]) for k in REPORT_FIELDS})


def _run_training(cfg: RunConfig, tcfg: TrainConfig, name: str, world: World | None = None) -> dict:
    world = world or build_world(cfg)
    rec = build_policy(cfg, Role.REC, world)
    user = build_policy(cfg, Role.USER, world)
    if not isinstance(rec, ToyPolicy) or not isinstance(user, ToyPolicy):
        raise UsageError("train-toy needs toy backends for both roles")
    result = train(world, tcfg, rec, user)
    out = Path(cfg.out_dir)
    report = result.to_json(config_json(tcfg))
    _write_json(out / f"{name}.json", report)
    write_report_csv(out / f"{name}.csv", result.epochs)
    np.savetxt(out / f"{name}-rec-params.txt", result.rec_policy.params)
    np.savetxt(out / f"{name}-user-params.txt", result.user_policy.params)
    return report


def _summary(report: dict) -> dict:
    final = next((r for r in reversed(report["epochs"]) if r["holdout_hit_at_1"] is not None), None)
    return {
        "baseline": report["baseline"],
        "final": None if final is None else {k: final[k] for k in ("epoch", "holdout_hit_at_1", "holdout_user_f1")},
    }


# -- subcommands --------------------------------------------------------------


def cmd_ingest(args) -> int:
    log = ingest(args.file)
    log.write(args.out)
    print(json.dumps({"rows": len(log), "users": len(log.users), "items": len(log.items), "duplicates": log.duplicates}))
    return 0


def cmd_embed(args) -> int:
    split = chronological_split(ingest(args.log))
    items = list(dict.fromkeys([*split.train.items, *split.ground_truth.values()]))
    emb = train_embeddings(split.train, dim=args.dim, epochs=args.epochs, lr=args.lr, seed=args.seed, items=items)
    emb.save(args.out)
    print(json.dumps({"users": len(emb.users), "items": len(emb.items), "dim": emb.dim, "losses": list(emb.losses)}))
    return 0


def cmd_candidates(args) -> int:
    split = chronological_split(ingest(args.log))
    emb = EmbeddingTable.load(args.emb)
    cands = {u: build_candidates(split.histories[u], gt, emb, args.k) for u, gt in split.ground_truth.items()}
    write_item_lists(args.out, split.ground_truth, cands)
    print(json.dumps({"users": len(cands), "k": args.k, "dropped_users": split.dropped}))
    return 0


def cmd_episode(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    world = build_world(cfg)
    rec = build_policy(cfg, Role.REC, world)
    user = build_policy(cfg, Role.USER, world)
    users = _episode_users(cfg, world)
    jobs = [(world.histories[u], world.candidates[u], world.ground_truth[u]) for u in users]
    peers = world.peer_source(cfg.max_peers, cfg.seed, render_text=True)
    trajs = run_episodes(jobs, rec, user, peers, cfg.episode_config(), workers=cfg.concurrency)
    path = Path(cfg.trajectories_path or Path(cfg.out_dir) / "trajectories.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(path, trajs)
    print(json.dumps({"episodes": len(trajs), "trajectories": str(path)}))
    return 0


def cmd_score(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    trajs, existing = read_log(args.log)
    if existing:
        raise DataError(f"{args.log} already holds {len(existing)} reward records")
    records = []
    for traj in trajs:
        records += [reward_record(traj.user, br) for br in score_trajectory(traj, cfg.reward_config())]
    append_records(args.log, records)
    print(json.dumps({"trajectories": len(trajs), "reward_records": len(records)}))
    return 0


def cmd_train_toy(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    report = _run_training(cfg, train_config(cfg), args.name)
    print(json.dumps({"report": str(Path(cfg.out_dir) / f"{args.name}.json"), **_summary(report)}))
    return 0


def cmd_eval_rec(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    world = build_world(cfg)
    rec = build_policy(cfg, Role.REC, world)
    user = build_policy(cfg, Role.USER, world)
    peers = world.peer_source(cfg.max_peers, cfg.seed, render_text=True)
    report, _ = run_rec_eval(
        rec, user, world.histories, world.ground_truth, world.candidates, peers,
        cfg.episode_config(), greedy=cfg.eval_greedy, workers=cfg.concurrency,
        users=_episode_users(cfg, world),
    )
    return _emit_eval(args, report)


def cmd_eval_user(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    world = build_world(cfg)
    user = build_policy(cfg, Role.USER, world)
    peers = world.peer_source(cfg.max_peers, cfg.seed, render_text=True)
    report = run_user_sim_eval(
        user, world.histories, world.ground_truth, seed=cfg.seed, distractors=world.distractors,
        peer_source=peers, greedy=cfg.eval_greedy, users=_episode_users(cfg, world),
    )
    return _emit_eval(args, report)


def _emit_eval(args, report) -> int:
    text = json.dumps(report.to_json(detail=args.detail), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def render_transcript(log_path) -> str:
    trajs, rewards = read_log(log_path)
    lines = []
    for traj in trajs:
        gt = traj.ground_truth
        head = f"== user {traj.user} | ground truth {gt if gt is not None else '?'} | final {traj.final_item} ({traj.terminated_by.value})"
        if gt is not None:
            head += f" | hit {int(traj.final_item == gt)}"
        lines.append(head)
        computed = {}
        if gt is not None and not any((traj.user, t.turn_index) in rewards for t in traj.turns):
            computed = {br.turn_index: br for br in score_trajectory(traj)}
        for t in traj.turns:
            lines.append(f"turn {t.turn_index} | candidates: {', '.join(t.candidates)}")
            lines.append(f"  rec  -> {t.rec.item}: {t.rec.rationale}")
            lines.append(f"  user -> {t.user.action.value} {t.user.score:.2f}: {t.user.rationale}")
            if t.peer is not None:
                lines.append(f"  peer similarity: {t.peer.similarity:+.3f}")
            br = rewards.get((traj.user, t.turn_index)) or computed.get(t.turn_index)
            if br is not None:
                lines.append(
                    f"  reward: rec={br.rec_reward:+.4f} user={br.user_reward:+.4f} "
                    f"depth={br.depth_factor:.3f} eligible={'yes' if br.rl_eligible else 'no'}"
                )
            if gt is not None:
                lines.append(f"  diagnosis: {diagnose(t, gt)}")
        lines.append("")
    return "\n".join(lines)


def cmd_replay(args) -> int:
    text = render_transcript(args.log)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = config_mod.load(args.config, args.set)
    drops = list(ABLATIONS) if "all" in args.drop else list(dict.fromkeys(args.drop))
    base = train_config(cfg)
    world = build_world(cfg)
    summary = {}
    variants = (["full"] if args.with_full else []) + drops
    for variant in variants:
        tcfg = base if variant == "full" else ablation_config(base, variant)
        report = _run_training(cfg, tcfg, f"ablate-{variant}", world)
        summary[variant] = _summary(report)["final"]
    print(json.dumps(summary))
    return 0


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coars", description="Co-evolving recommender/user-simulator agents.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return sp

    sp = sub.add_parser("ingest", help="validate an interaction file")
    sp.add_argument("file")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("embed", help="train MF embeddings on the leave-last-out training split")
    sp.add_argument("log")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("candidates", help="ground truth plus top-(k-1) candidates per user")
    sp.add_argument("log")
    sp.add_argument("emb")
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_candidates)

    sp = with_config(sub.add_parser("episode", help="run episodes and write a trajectory log"))
    sp.set_defaults(func=cmd_episode)

    sp = sub.add_parser("score", help="append reward records to a trajectory log")
    sp.add_argument("log")
    with_config(sp)
    sp.set_defaults(func=cmd_score)

    sp = with_config(sub.add_parser("train-toy", help="co-evolve toy policies"))
    sp.add_argument("--name", default="train-toy")
    sp.set_defaults(func=cmd_train_toy)

    for name, func in (("eval-rec", cmd_eval_rec), ("eval-user", cmd_eval_user)):
        sp = with_config(sub.add_parser(name))
        sp.add_argument("--out")
        sp.add_argument("--detail", action="store_true", help="include per-case records")
        sp.set_defaults(func=func)

    sp = sub.add_parser("replay", help="render a trajectory log as a transcript")
    sp.add_argument("log")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_replay)

    sp = with_config(sub.add_parser("ablate", help="single-component ablation runs"))
    sp.add_argument("--drop", nargs="+", required=True, choices=[*ABLATIONS, "all"])
    sp.add_argument("--with-full", action="store_true", help="also run the unablated configuration")
    sp.set_defaults(func=cmd_ablate)
    return p


def _fail(err: BaseException, code: int) -> int:
    line = {"error": type(err).__name__, "message": str(err).replace("\n", " "), "exit": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CoarsError as err:
        return _fail(err, err.exit_code)
    except OSError as err:
        return _fail(DataError(f"{err.filename}: {err.strerror}"), 2)


if __name__ == "__main__":
    sys.exit(main())
