import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepwise_dpo.decode import (STRATEGIES, DecodeConfig, best_of_n, decode_answer,
                                 evaluate_accuracy, majority_answer, sample_next_values,
                                 select_best, self_consistency, step_beam_search,
                                 write_accuracy_csv)
from stepwise_dpo.env import GenConfig, generate_problem, gold_answer
from stepwise_dpo.policy import FeatureMap, PolicyParams, greedy_decode, sample_solutions
from stepwise_dpo.prm import PrmParams, min_aggregate, step_scores

from conftest import random_policy

FMAP = FeatureMap(13, 3, 4)


def problems(n, D=3, kinds=("add", "sub", "mul"), V=13):
    return [generate_problem(k, GenConfig(V=V, D=D, op_kinds=kinds), problem_id=f"d{k}")
            for k in range(n)]


def pinned(fmap, slot):
    theta = np.zeros(fmap.shape)
    theta[:, slot] = 1000.0
    return PolicyParams(fmap, theta)


def random_prm(fmap, seed):
    return PrmParams(fmap, np.random.default_rng(seed).standard_normal(fmap.shape))


def test_majority_vote():
    assert majority_answer([7, 7, 3]) == 7
    assert majority_answer([5, 2, 5, 2]) == 2
    assert majority_answer([9]) == 9


def test_sc_single_sample_is_that_sample():
    p = problems(1)[0]
    pol = random_policy(FMAP, 1)
    cfg = DecodeConfig(n_samples=1)
    got = self_consistency(pol, p, cfg, np.random.default_rng(4))
    want = sample_solutions(pol, p, 1, cfg.temperature, np.random.default_rng(4))[0].answer
    assert got == want


def test_deterministic_policy_sc_equals_greedy():
    pol = pinned(FMAP, 2)
    for p in problems(10):
        assert self_consistency(pol, p, DecodeConfig(n_samples=7), np.random.default_rng(0)) \
            == greedy_decode(pol, p).answer


def test_select_best_hand_example():
    assert select_best([[.9, .2], [.6, .5], [.8, .4]]) == 1
    assert select_best([[.5, .5], [.5, .5]]) == 0
    assert select_best([[.3, .9], [.9, .3], [.3, .5]]) == 0  # mean breaks the min tie


def test_bon_constant_prm_returns_first_sample():
    p = problems(1)[0]
    pol = random_policy(FMAP, 2)
    cfg = DecodeConfig(n_samples=6)
    got = best_of_n(pol, PrmParams(FMAP), p, cfg, np.random.default_rng(1))
    first = sample_solutions(pol, p, 6, cfg.temperature, np.random.default_rng(1))[0]
    assert got == first


def test_bon_single_sample():
    p = problems(1)[0]
    pol = random_policy(FMAP, 3)
    got = best_of_n(pol, random_prm(FMAP, 0), p, DecodeConfig(n_samples=1), np.random.default_rng(2))
    assert got == sample_solutions(pol, p, 1, 0.8, np.random.default_rng(2))[0]


def test_sbs_single_beam_low_temperature_is_greedy():
    pol = random_policy(FMAP, 4)
    prm = random_prm(FMAP, 4)
    cfg = DecodeConfig(b1=1, b2=1, temperature=1e-4)
    for p in problems(10):
        assert step_beam_search(pol, prm, p, cfg, np.random.default_rng(0)) == greedy_decode(pol, p)


def test_sbs_matches_bon_on_single_step():
    pol = random_policy(FeatureMap(13, 1, 4), 5)
    prm = random_prm(pol.fmap, 5)
    for p in problems(30, D=1):
        sbs = step_beam_search(pol, prm, p, DecodeConfig(b1=6, b2=6), np.random.default_rng(p.start))
        bon = best_of_n(pol, prm, p, DecodeConfig(n_samples=6), np.random.default_rng(p.start))
        assert sbs.answer == bon.answer


def test_sbs_deduplicates_and_respects_widths():
    pol = random_policy(FMAP, 6)
    prm = random_prm(FMAP, 6)
    cfg = DecodeConfig(b1=8, b2=2)
    for p in problems(10):
        trace = []
        step_beam_search(pol, prm, p, cfg, np.random.default_rng(0), trace=trace)
        first, *rest = trace
        assert first[0] <= FMAP.B and first[1] <= cfg.b2
        for n_cands, kept in rest:
            assert n_cands <= min(cfg.b2 * cfg.b1, cfg.b2 * FMAP.B) and kept <= cfg.b2


def test_sbs_step_budget_marks_partial():
    pol = random_policy(FMAP, 7)
    y = step_beam_search(pol, random_prm(FMAP, 7), problems(1)[0], DecodeConfig(C=2),
                         np.random.default_rng(0))
    assert y.partial and len(y.steps) == 2


def test_next_value_draws_match_full_sampling():
    pol = random_policy(FMAP, 8)
    p = problems(1)[0]
    a = sample_next_values(pol, p, (), 50, 0.8, np.random.default_rng(3))
    b = [s.steps[0] for s in sample_solutions(pol, p, 50, 0.8, np.random.default_rng(3))]
    assert a == b


def test_perfect_and_wrong_policies():
    probs = problems(20, kinds=("add", "sub"), V=47)
    fmap = FeatureMap(47, 3, 4, op_kinds=("add", "sub"))
    prm = random_prm(fmap, 9)
    cfg = DecodeConfig(n_samples=3, b1=3, b2=2)
    for s in STRATEGIES:
        assert evaluate_accuracy(s, pinned(fmap, 0), prm, probs, cfg).accuracy == 1.0
        # slot 1 adds +1 at every step; on add/sub chains the error never cancels
        assert evaluate_accuracy(s, pinned(fmap, 1), prm, probs, cfg).accuracy == 0.0


def test_prm_strategies_need_prm():
    with pytest.raises(ValueError):
        decode_answer("bon", random_policy(FMAP), None, problems(1)[0], DecodeConfig(),
                      np.random.default_rng(0))
    with pytest.raises(ValueError):
        decode_answer("vote", random_policy(FMAP), None, problems(1)[0], DecodeConfig(),
                      np.random.default_rng(0))


@given(st.integers(0, 3000), st.sampled_from(STRATEGIES))
def test_answers_in_range_and_reproducible(seed, strategy):
    p = generate_problem(seed, GenConfig(V=13, D=3))
    pol, prm = random_policy(FMAP, seed), random_prm(FMAP, seed)
    cfg = DecodeConfig(n_samples=4, b1=3, b2=2)
    a = decode_answer(strategy, pol, prm, p, cfg, np.random.default_rng(seed))
    b = decode_answer(strategy, pol, prm, p, cfg, np.random.default_rng(seed))
    assert a == b and 0 <= a < 13


@given(st.integers(0, 3000))
def test_bon_selection_is_pool_maximum(seed):
    p = generate_problem(seed, GenConfig(V=13, D=3))
    pol, prm = random_policy(FMAP, seed), random_prm(FMAP, seed + 1)
    cfg = DecodeConfig(n_samples=8)
    chosen = best_of_n(pol, prm, p, cfg, np.random.default_rng(seed))
    pool = sample_solutions(pol, p, 8, cfg.temperature, np.random.default_rng(seed))
    best = max(min_aggregate(step_scores(prm, p, y)) for y in pool)
    assert min_aggregate(step_scores(prm, p, chosen)) == best


def test_config_validation():
    for bad in (dict(n_samples=0), dict(b1=1, b2=2), dict(C=0), dict(temperature=0),
                dict(beam_score="max")):
        with pytest.raises(ValueError):
            DecodeConfig(**bad).validate()


def test_accuracy_csv(tmp_path):
    probs = problems(5)
    rep = evaluate_accuracy("greedy", random_policy(FMAP), None, probs, DecodeConfig(), seed=3)
    path = tmp_path / "acc.csv"
    write_accuracy_csv(path, [rep], timing=False)
    row = next(csv.DictReader(path.open()))
    assert row["strategy"] == "greedy" and row["seed"] == "3" and row["mean_seconds"] == ""
    assert float(row["accuracy"]) == rep.accuracy
    assert rep.accuracy == np.mean([greedy_decode(random_policy(FMAP), p).answer == gold_answer(p)
                                    for p in probs])


def test_sc_more_samples_not_worse(default_run):
    cfg, st_ = default_run
    probs = st_.problems["eval"][:1000]
    pol = st_.dpo.policy
    sc5 = evaluate_accuracy("sc", pol, None, probs, DecodeConfig(n_samples=5), cfg.seed).accuracy
    sc15 = evaluate_accuracy("sc", pol, None, probs, DecodeConfig(n_samples=15), cfg.seed).accuracy
    assert sc15 >= sc5 - 0.03
