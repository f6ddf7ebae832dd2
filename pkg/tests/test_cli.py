import json
import subprocess
import sys

import pytest

from joinrl.agents import load_policy
from joinrl.catalog import load_catalog
from joinrl.cli import main
from joinrl.experiment import read_cost_report
from joinrl.workload import load_split, load_workload

TINY = ["--set", "total_steps=256", "--set", "rollout_steps=128", "--set", "minibatch_size=64", "--set", "hidden=[16]"]


def _gen(out, *extra):
    assert main(["gen", "--out", str(out), "--tables", "8", "--queries", "24", "--max-relations", "6", "--seed", "7",
                 *extra]) == 0


def _paths(d):
    return ["--catalog", str(d / "catalog.json"), "--workload", str(d / "workload.json"),
            "--split-file", str(d / "split.json")]


def _train(d, seed, *extra):
    return main(["train", "--agent", "ppo", "--preset", "ppo-desk", *TINY, "--seed", str(seed), "--out", str(d),
                 *_paths(d), *extra])


@pytest.fixture
def gen_dir(tmp_path):
    _gen(tmp_path)
    return tmp_path


def test_gen_is_deterministic_and_loadable(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["gen", "--out", str(d), "--tables", "10", "--queries", "60", "--seed", "7",
                     "--lookup-noise", "1.0"]) == 0
    for name in ("catalog.json", "workload.json", "split.json", "lookup.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    cat = load_catalog(a / "catalog.json")
    wl = load_workload(a / "workload.json", cat)
    load_split(a / "split.json").check(wl, require_full_test_coverage=False)
    assert cat.n_tables == 10 and len(wl) == 60


def test_gen_rejects_single_table(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--tables", "1"]) == 2
    assert "joinrl gen" in capsys.readouterr().err


def test_train_paper_preset_records_published_values(gen_dir):
    rc = main(["train", "--agent", "ppo", "--preset", "ppo-paper", "--set", "total_steps=256", "--set",
               "rollout_steps=128", "--out", str(gen_dir), *_paths(gen_dir)])
    assert rc == 0
    policy = load_policy(gen_dir / "ppo-f0-s0.mlp")
    assert policy.config["clip"] == 0.3 and policy.config["hidden"] == [256, 256]
    assert policy.net.sizes[1:3] == [256, 256]
    metrics = (gen_dir / "ppo-f0-s0-metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("step,loss") and len(metrics) == 3


def test_train_usage_errors(gen_dir):
    assert main(["train", "--agent", "ppo", "--preset", "ppo-nope", *_paths(gen_dir)]) == 2
    assert main(["train", "--agent", "dqn", "--preset", "ppo-desk", *_paths(gen_dir)]) == 2
    assert main(["train", "--agent", "ppo", "--preset", "ppo-desk", "--set", "clip=0", *_paths(gen_dir)]) == 2
    assert main(["train", "--agent", "ppo", "--preset", "ppo-desk", "--fold", "9", *_paths(gen_dir)]) == 2
    assert main(["train", "--agent", "ppo", "--preset", "ppo-desk", "--catalog", str(gen_dir / "none.json")]) == 2
    assert main(["train", "--agent", "sarsa"]) == 2


def test_same_seed_gives_byte_identical_policies(gen_dir, tmp_path):
    other = tmp_path / "again"
    other.mkdir()
    for name in ("catalog.json", "workload.json", "split.json"):
        (other / name).write_bytes((gen_dir / name).read_bytes())
    assert _train(gen_dir, 4) == 0 and _train(other, 4) == 0
    assert (gen_dir / "ppo-f0-s4.mlp").read_bytes() == (other / "ppo-f0-s4.mlp").read_bytes()


def test_compare_covers_every_test_query(gen_dir, capsys):
    for seed in range(5):
        assert _train(gen_dir, seed) == 0
    policies = [arg for s in range(5) for arg in ("--policy", str(gen_dir / f"ppo-f0-s{s}.mlp"))]
    assert main(["compare", *policies, "--out", str(gen_dir), *_paths(gen_dir)]) == 0
    report = read_cost_report(gen_dir / "compare-costs.csv")
    test_ids = set(load_split(gen_dir / "split.json").test(0))
    assert "DP" in report.planners and "ensemble" in report.planners and len(report.planners) == 7
    for planner in report.planners:
        assert set(report.costs(planner)) == test_ids
    assert "median" in capsys.readouterr().out
    assert main(["eval", *policies[:2], "--out", str(gen_dir), *_paths(gen_dir), "--all-queries"]) == 0
    assert len(read_cost_report(gen_dir / "eval-costs.csv").records) == 24

    assert main(["report", "--costs", str(gen_dir / "compare-costs.csv"), "--out", str(gen_dir), *_paths(gen_dir)]) == 0
    assert (gen_dir / "summary.csv").is_file() and (gen_dir / "occurrence.csv").is_file()


def test_eval_refuses_foreign_catalog(gen_dir, tmp_path):
    assert _train(gen_dir, 0) == 0
    other = tmp_path / "other"
    assert main(["gen", "--out", str(other), "--tables", "8", "--queries", "24", "--max-relations", "6",
                 "--seed", "8"]) == 0
    rc = main(["eval", "--policy", str(gen_dir / "ppo-f0-s0.mlp"), "--out", str(other), *_paths(other)])
    assert rc == 2


def test_latency_has_enough_buckets(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--tables", "12", "--queries", "20", "--min-relations", "3",
                 "--max-relations", "12", "--extra-edges", "1.0", "--seed", "3", "--split", "random"]) == 0
    assert main(["latency", "--repetitions", "1", "--out", str(tmp_path), *_paths(tmp_path)]) == 0
    lines = [l for l in (tmp_path / "latency.csv").read_text().splitlines() if not l.startswith("#")]
    buckets = {int(l.split(",")[0]) for l in lines[1:]}
    assert len(buckets) >= 4 and min(buckets) >= 3 and max(buckets) <= 12


def test_dp_writes_every_query(gen_dir):
    assert main(["dp", "--out", str(gen_dir), *_paths(gen_dir)]) == 0
    body = [l for l in (gen_dir / "dp.csv").read_text().splitlines() if not l.startswith("#")]
    assert len(body) == 25


def test_config_file_and_precedence(gen_dir, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "train": {"agent": "ppo", "preset": "ppo-desk", "set": TINY[1::2]}}))
    out = tmp_path / "env-out"
    monkeypatch.setenv("JOINRL_OUT", str(out))
    assert main(["train", "--config", str(cfg), *_paths(gen_dir)]) == 0
    assert (out / "ppo-f0-s3.mlp").is_file()
    assert main(["train", "--config", str(cfg), "--seed", "5", *_paths(gen_dir)]) == 0
    assert (out / "ppo-f0-s5.mlp").is_file()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--config", str(cfg), *_paths(gen_dir)]) == 2



def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "joinrl.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "compare" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "joinrl.cli", "gen", "--tables", "x"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_run_subcommand(gen_dir):
    rc = main(["run", "--agents", "ppo:ppo-desk", "--seeds", "0", "1", "--ensemble", "2", "--jobs", "1", *TINY,
               "--out", str(gen_dir), *_paths(gen_dir)])
    assert rc == 0
    report = read_cost_report(gen_dir / "run-costs.csv")
    assert report.planners == ["DP", "PPO-ensemble", "PPO-s0", "PPO-s1"]
    assert (gen_dir / "ppo-s1-f3.mlp").is_file()
    assert main(["run", "--agents", "ppo", *_paths(gen_dir)]) == 2
    assert main(["run", "--agents", "ppo:ppo-desk", "--seeds", "0", "--ensemble", "3", *TINY, *_paths(gen_dir)]) == 2
