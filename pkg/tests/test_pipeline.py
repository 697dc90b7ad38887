import pytest

from stepwise_dpo.env import ConfigError
from stepwise_dpo.pipeline import (SPLITS, ExperimentConfig, load_config, make_problems,
                                   parse_overrides)


def test_overrides_are_typed():
    cfg = parse_overrides(ExperimentConfig(), {"dpo.gamma": "2", "n_eval": "50",
                                               "env.op_kinds": "add,sub", "prm.threshold": "0.5"})
    assert cfg.dpo.gamma == 2.0 and cfg.n_eval == 50
    assert cfg.env.op_kinds == ("add", "sub") and cfg.prm.threshold == 0.5
    assert cfg.config_hash() != ExperimentConfig().config_hash()


def test_unknown_keys_rejected():
    with pytest.raises(KeyError):
        parse_overrides(ExperimentConfig(), {"dpo.nope": "1"})
    with pytest.raises(KeyError):
        parse_overrides(ExperimentConfig(), {"nosection.x": "1"})


def test_ini_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nseed = 4\nn_eval = 20\n\n[budget]\nN = 2\n\n[decode]\nb2 = 2\n")
    cfg = load_config(path)
    assert (cfg.seed, cfg.n_eval, cfg.budget.N, cfg.decode.b2) == (4, 20, 2, 2)


def test_validation_catches_bad_subconfigs():
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(**{"env.V": 1}).validate()
    with pytest.raises(ValueError):
        ExperimentConfig().replace(**{"decode.b2": 9}).validate()
    with pytest.raises(ValueError):
        ExperimentConfig(n_pref=0).validate()


def test_splits_are_disjoint_and_seeded():
    cfg = ExperimentConfig(n_sft=20, n_prm=20, n_pref=20, n_eval=20)
    a, b = make_problems(cfg), make_problems(cfg)
    assert a == b
    ids = [p.id for s in SPLITS for p in a[s]]
    assert len(ids) == len(set(ids))
    other = make_problems(cfg.replace(seed=1))
    assert other["eval"] != a["eval"]
    # a split's problems do not depend on the size of other splits
    assert make_problems(cfg.replace(n_sft=5))["eval"] == a["eval"]
