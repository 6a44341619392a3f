import csv
import json
import subprocess
import sys

import pytest
from hypothesis import given, strategies as st

from coars import cli
from coars.config import RunConfig, load, loads
from coars.errors import DataError, UsageError


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [l for l in err.splitlines() if l.startswith("{")]
    assert len(lines) == 1
    return json.loads(lines[0])


def small_cfg(tmp_path, **extra):
    values = {
        "synthetic_users": 24,
        "synthetic_dim": 4,
        "epochs": 2,
        "episodes_per_epoch": 4,
        "eval_every": 2,
        "out_dir": tmp_path / "runs",
        **extra,
    }
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return path


# -- config -------------------------------------------------------------------


def test_round_trip_defaults():
    cfg = RunConfig()
    assert loads(cfg.dumps()) == cfg
    assert loads(cfg.dumps()).dumps() == cfg.dumps()


@given(
    st.floats(0, 1),
    st.floats(0, 1),
    st.sampled_from(["fixed", "ema"]),
    st.booleans(),
    st.one_of(st.none(), st.text("abc/._", min_size=1, max_size=8)),
)
def test_round_trip_random(lam, alpha, mode, greedy, path):
    cfg = RunConfig(lambda_rec=lam, alpha=alpha, teacher_mode=mode, eval_greedy=greedy, trajectories_path=path)
    assert loads(cfg.dumps()) == cfg


def test_unknown_and_bad_keys():
    with pytest.raises(DataError) as info:
        loads("seed = 1\nbogus = 2\n")
    assert info.value.line == 2
    with pytest.raises(DataError):
        loads("seed = one\n")
    with pytest.raises(DataError):
        loads("seed = 1\nseed = 2\n")
    with pytest.raises(UsageError):
        RunConfig().with_overrides(["nope=1"])
    with pytest.raises(UsageError):
        RunConfig(lambda_rec=-1.0)
    with pytest.raises(UsageError):
        RunConfig(rec_backend="remote")


def test_overrides_win(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 4\nlambda_user = 0.2\n", encoding="utf-8")
    cfg = load(path, ["seed=9"])
    assert (cfg.seed, cfg.lambda_user) == (9, 0.2)


# -- exit codes -----------------------------------------------------------------


def test_usage_error_exit_1(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1 and error_line(err)["exit"] == 1


def test_data_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("u\tA\tnoon\n", encoding="utf-8")
    code, _, err = run(["ingest", bad, "--out", tmp_path / "o.tsv"], capsys)
    line = error_line(err)
    assert code == 2 and line["error"] == "DataError" and "line 1" in line["message"]
    code, _, err = run(["ingest", tmp_path / "missing.tsv", "--out", tmp_path / "o.tsv"], capsys)
    assert code == 2


def test_backend_error_exit_3(tmp_path, capsys):
    cfg = small_cfg(tmp_path, user_backend="remote", endpoint="http://127.0.0.1:9", timeout=0.5)
    code, _, err = run(["eval-user", cfg], capsys)
    assert code == 3 and error_line(err)["error"] == "TransportError"


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "coars.cli", "ablate"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip().splitlines()[-1])["exit"] == 1


# -- subcommands -------------------------------------------------------------------


def test_ingest_embed_candidates(tmp_path, capsys):
    log = tmp_path / "raw.tsv"
    rows = [f"u{n}\ti{(n + k) % 30}\t{k}\n" for n in range(12) for k in range(4)]
    log.write_text("# events\n" + "".join(rows) + rows[0], encoding="utf-8")
    code, out, _ = run(["ingest", log, "--out", tmp_path / "log.tsv"], capsys)
    assert code == 0 and json.loads(out)["duplicates"] == 1
    code, out, _ = run(["embed", tmp_path / "log.tsv", "--out", tmp_path / "emb.txt", "--dim", 4, "--epochs", 3], capsys)
    assert code == 0 and json.loads(out)["dim"] == 4
    code, out, _ = run(["candidates", tmp_path / "log.tsv", tmp_path / "emb.txt", "--k", 5, "--out", tmp_path / "c.tsv"], capsys)
    assert code == 0
    lines = (tmp_path / "c.tsv").read_text().splitlines()
    assert len(lines) == 12
    for line in lines:
        user, gt, items = line.split("\t")
        assert gt in items.split(",") and len(items.split(",")) == 5


def test_episode_score_replay(tmp_path, capsys):
    cfg = small_cfg(tmp_path, trajectories_path=tmp_path / "t.jsonl")
    code, out, _ = run(["episode", cfg], capsys)
    assert code == 0 and json.loads(out)["episodes"] == 6
    code, out, _ = run(["score", tmp_path / "t.jsonl", cfg], capsys)
    assert code == 0 and json.loads(out)["reward_records"] > 0
    code, _, err = run(["score", tmp_path / "t.jsonl", cfg], capsys)
    assert code == 2
    code, out, _ = run(["replay", tmp_path / "t.jsonl"], capsys)
    assert code == 0 and out.count("== user") == 6 and "reward: rec=" in out


def test_train_toy_writes_reports(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    code, out, _ = run(["train-toy", cfg, "--name", "t"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "runs" / "t.json").read_text())
    assert len(report["epochs"]) == 2 and report["config"]["epochs"] == 2
    rows = list(csv.DictReader(open(tmp_path / "runs" / "t.csv")))
    assert tuple(rows[0]) == cli.REPORT_FIELDS and rows[0]["holdout_hit_at_1"] == ""
    assert (tmp_path / "runs" / "t-rec-params.txt").exists()
    summary = json.loads(out)
    assert summary["final"]["epoch"] == 2


def test_ablate_sd_rec_only_zeroes_lambda_rec(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    code, out, _ = run(["ablate", cfg, "--drop", "sd-rec", "--with-full"], capsys)
    assert code == 0 and set(json.loads(out)) == {"full", "sd-rec"}
    full = json.loads((tmp_path / "runs" / "ablate-full.json").read_text())["config"]
    drop = json.loads((tmp_path / "runs" / "ablate-sd-rec.json").read_text())["config"]
    assert drop["objective"]["lambda_rec"] == 0.0
    drop["objective"]["lambda_rec"] = full["objective"]["lambda_rec"]
    assert drop == full


def test_eval_commands_with_trained_params(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    run(["train-toy", cfg, "--name", "t"], capsys)
    params = [f"--set=rec_params_path={tmp_path / 'runs' / 't-rec-params.txt'}",
              f"--set=user_params_path={tmp_path / 'runs' / 't-user-params.txt'}"]
    code, out, _ = run(["eval-rec", cfg, *params], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["n_cases"] == 6 and rep["per_case"] is None
    code, _, _ = run(["eval-user", cfg, *params, "--detail", "--out", tmp_path / "u.json"], capsys)
    rep = json.loads((tmp_path / "u.json").read_text())
    assert code == 0 and len(rep["per_case"]) == 6 and 0 <= rep["f1"] <= 1


def test_deterministic_under_seed(tmp_path, capsys):
    cfg = small_cfg(tmp_path)
    _, a, _ = run(["eval-user", cfg], capsys)
    _, b, _ = run(["eval-user", cfg], capsys)
    assert a == b
