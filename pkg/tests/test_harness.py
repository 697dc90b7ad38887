import csv
import json

import numpy as np
import pytest

from stepwise_dpo import harness
from stepwise_dpo.cli import main
from stepwise_dpo.dpo import train_vanilla_dpo
from stepwise_dpo.env import enumerate_success_prob
from stepwise_dpo.pipeline import ExperimentConfig
from stepwise_dpo.policy import PolicyParams

SMALL = ["n_sft=100", "n_prm=120", "n_pref=200", "n_eval=300", "budget.M=16"]
ARTIFACTS = ["problems.jsonl", "sft-policy.params", "prm-data.jsonl", "prm.params",
             "pairs.jsonl", "policy.params", "metrics/prm-train.csv", "metrics/dpo-train.jsonl",
             "metrics/eval-sft.csv", "metrics/eval-dpo.csv", "report.json"]


def cli(*args):
    return main(list(args) + ["-q"])


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli("run", "--out", str(out), *SMALL) == 0
    return out


def test_all_artifacts_written(small_run):
    for name in ARTIFACTS:
        assert (small_run / name).exists(), name


def test_headers_carry_hash_and_seed(small_run):
    want = ExperimentConfig().replace(n_sft=100, n_prm=120, n_pref=200, n_eval=300,
                                      **{"budget.M": 16}).config_hash()
    for name in ["problems.jsonl", "prm-data.jsonl", "pairs.jsonl"]:
        head = json.loads((small_run / name).read_text().splitlines()[0])["header"]
        assert head["config_hash"] == want and head["seed"] == 0
    for name in ["sft-policy.params", "prm.params", "policy.params", "report.json"]:
        head = json.loads((small_run / name).read_text())["header"]
        assert head["config_hash"] == want and head["seed"] == 0
    cost = json.loads((small_run / "prm-data.jsonl").read_text().splitlines()[0])["header"]["cost"]
    assert cost["rollouts"] == 120 * 16 * 4


def test_stage_isolation(small_run, tmp_path):
    for name in ["problems.jsonl", "sft-policy.params", "prm-data.jsonl", "prm.params"]:
        (tmp_path / name).write_bytes((small_run / name).read_bytes())
    assert cli("build-pairs", "--out", str(tmp_path), *SMALL) == 0
    assert cli("train-dpo", "--out", str(tmp_path), *SMALL) == 0
    for name in ["pairs.jsonl", "policy.params", "metrics/dpo-train.jsonl"]:
        assert (tmp_path / name).read_bytes() == (small_run / name).read_bytes()


def test_missing_artifact_exit(tmp_path, capsys):
    assert cli("train-prm", "--out", str(tmp_path)) != 0
    assert "missing artifact" in capsys.readouterr().err


def test_bad_flags_and_overrides(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--no-such-flag"])
    assert e.value.code == 2
    assert cli("gen-problems", "--out", str(tmp_path), "dpo.bogus=1") == 2
    assert cli("gen-problems", "--out", str(tmp_path), "n_eval") == 2
    assert cli("gen-problems", "--out", str(tmp_path), "env.V=1") == 2
    with pytest.raises(SystemExit):
        main(["eval", "--strategy", "vote"])


def test_seed_flag_changes_problems(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli("gen-problems", "--out", str(a), "--seed", "1", *SMALL) == 0
    assert cli("gen-problems", "--out", str(b), "--seed", "2", *SMALL) == 0
    assert (a / "problems.jsonl").read_bytes() != (b / "problems.jsonl").read_bytes()


def test_config_file_and_flag_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nseed = 5\nn_eval = 7\n")
    assert cli("gen-problems", "--out", str(tmp_path), "--config", str(ini), "n_eval=9",
               "--seed", "6") == 0
    head = json.loads((tmp_path / "problems.jsonl").read_text().splitlines()[0])["header"]
    assert head["seed"] == 6 and head["counts"]["eval"] == 9


def test_untrained_policy_near_chance(tmp_path):
    assert cli("gen-problems", "--out", str(tmp_path)) == 0
    assert cli("eval", "--policy", "base", "--out", str(tmp_path)) == 0
    acc = float(read_rows(tmp_path / "metrics/eval-base.csv")[0]["accuracy"])
    cfg = ExperimentConfig()
    uniform = PolicyParams(cfg.fmap())
    probs = harness.load_problems(cfg, harness.RunPaths(tmp_path))["eval"]
    chance = np.mean([enumerate_success_prob(uniform, p, []) for p in probs])
    assert abs(acc - chance) < 0.02


def test_sweep_gamma_rows_and_vanilla(small_run):
    assert cli("sweep-gamma", "--out", str(small_run), "--values", "0,0.25,0.5,1,2,4",
               "--with-vanilla", *SMALL) == 0
    rows = read_rows(small_run / "metrics/sweep-gamma.csv")
    assert [r["gamma"] for r in rows] == ["0.0", "0.25", "0.5", "1.0", "2.0", "4.0", "vanilla"]
    assert rows[0]["greedy_accuracy"] == rows[-1]["greedy_accuracy"]
    first = (small_run / "metrics/sweep-gamma.csv").read_bytes()
    assert cli("sweep-gamma", "--out", str(small_run), "--values", "0,0.25,0.5,1,2,4",
               "--with-vanilla", *SMALL) == 0
    assert (small_run / "metrics/sweep-gamma.csv").read_bytes() == first


def test_gamma_zero_policy_matches_vanilla_trainer(small_run):
    cfg = ExperimentConfig().replace(n_sft=100, n_prm=120, n_pref=200, n_eval=300,
                                     **{"budget.M": 16})
    paths = harness.RunPaths(small_run)
    sft = harness.load_policy(cfg, paths, "sft")
    pairs = harness.load_pairs(cfg, paths)
    probs = harness.load_problems(cfg, paths)["pref"]
    from stepwise_dpo.pipeline import train_dpo_stage
    import dataclasses
    a = train_dpo_stage(cfg, sft, pairs, probs, gamma=0.0).policy
    b = train_vanilla_dpo(sft, sft.copy(), pairs, probs, dataclasses.replace(cfg.dpo, seed=cfg.seed))
    np.testing.assert_allclose(a.theta, b.theta, rtol=0, atol=1e-9)


def test_sweep_n_cost_ratio(small_run):
    assert cli("sweep-n", "--out", str(small_run), "--values", "0,1,8", *SMALL) == 0
    rows = {r["N"]: r for r in read_rows(small_run / "metrics/sweep-n.csv")}
    ratio = int(rows["8"]["rollouts"]) / int(rows["1"]["rollouts"])
    assert abs(ratio - 8) <= 0.8
    assert int(rows["0"]["rollouts"]) * 6 <= int(rows["8"]["rollouts"])
