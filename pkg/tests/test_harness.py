import math

import numpy as np
import pytest

from poisonlab.attacks import build_faa, build_nonadaptive_attack, null_attack
from poisonlab.envs import build_chain, build_gridworld, shipped_grid_spec
from poisonlab.harness import (
    CURVES_HEADER,
    EVALUATE_HEADER,
    TRIAL_HEADER,
    TrialConfig,
    aggregate,
    curves_csv,
    evaluate,
    rle_decode,
    rle_encode,
    run_trial,
    run_trials,
    stats_csv,
    sweep,
    trial_csv,
    trial_rng,
)
from poisonlab.mdp import TabularMdp
from poisonlab.qlearner import PAPER_LEARNER, LearnerParams, LearningRate


@pytest.fixture(scope="module")
def chain4():
    return build_chain(4)


def _capped(mdp, cap):
    return TabularMdp(mdp.transition, mdp.reward, mdp.initial_dist, mdp.terminal, episode_cap=cap)


def test_rle_round_trip():
    x = np.array([1, 1, 0, 0, 0, 2, 1], dtype=np.int32)
    vals, lens = rle_encode(x)
    np.testing.assert_array_equal(vals, [1, 0, 2, 1])
    np.testing.assert_array_equal(lens, [2, 3, 1, 1])
    np.testing.assert_array_equal(rle_decode(vals, lens), x)
    empty = rle_encode(np.zeros(0, dtype=np.int8))
    assert rle_decode(*empty).size == 0


def test_trial_seeds_are_counter_based():
    a = trial_rng(7, 3).random(4)
    b = trial_rng(7, 3).random(4)
    c = trial_rng(7, 4).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("lr", [LearningRate.constant(0.9), LearningRate.polynomial(0.6), LearningRate.polynomial(0.77, "visits")])
@pytest.mark.parametrize("attack", ["none", "nonadaptive", "faa"])
def test_compiled_and_python_paths_agree(chain4, lr, attack):
    mdp, target = chain4
    mdp = _capped(mdp, 7)
    params = LearnerParams(lr=lr)
    att = {
        "none": null_attack(),
        "nonadaptive": build_nonadaptive_attack(mdp, 0.9, target, 0.2),
        "faa": build_faa(mdp, params, target, 1.0),
    }[attack]
    cfg = TrialConfig(mdp, target, params, att, 2_000)
    fast = run_trial(cfg, 2, 11, full=True)
    slow = run_trial(cfg, 2, 11, full=True, fast=False)
    np.testing.assert_array_equal(fast.final_q, slow.final_q)
    np.testing.assert_array_equal(fast.delta, slow.delta)
    np.testing.assert_array_equal(fast.cost01, slow.cost01)
    np.testing.assert_array_equal(fast.achieved, slow.achieved)
    np.testing.assert_allclose(fast.rho, slow.rho, atol=1e-12)
    assert (fast.J, fast.n_clipped, fast.last_cost_step) == (slow.J, slow.n_clipped, slow.last_cost_step)


def test_record_invariants(chain4):
    mdp, target = chain4
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, build_faa(mdp, PAPER_LEARNER, target, 1.0), 20_000)
    rec = run_trial(cfg, 0, 0, full=True)
    cost, ach = rec.cost01, rec.achieved
    assert rec.J == cost.sum()
    assert cost[0] == 1  # Q_0 = 0 ties everywhere
    assert ach.min() >= 0 and ach.max() <= 4
    assert np.all(ach[cost == 0] == 4)
    assert rec.final_in_target
    tail = cost[-len(cost) // 10:]
    assert not tail.any()
    assert rec.max_abs_delta <= 1.0
    assert len(rec.delta) == len(rec.rho) == rec.T


def test_gridworld_trial_runs():
    mdp, target = build_gridworld(shipped_grid_spec("grid10_target1"))
    faa = build_faa(mdp, PAPER_LEARNER, target, 1.0)
    rec = run_trial(TrialConfig(mdp, target, PAPER_LEARNER, faa, 20_000), 0, 0)
    assert rec.J < 20_000
    assert rec.final_in_target


def test_identical_seeds_give_zero_stderr(chain4):
    mdp, target = chain4
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, build_faa(mdp, PAPER_LEARNER, target, 1.0), 3_000)
    rec = run_trial(cfg, 5, 0)
    st = aggregate([rec, rec])
    assert st.stderr_J == 0.0 and st.mean_J == rec.J


def test_trial_sets_extend_without_reshuffling(chain4):
    mdp, target = chain4
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, build_faa(mdp, PAPER_LEARNER, target, 1.0), 3_000)
    small = run_trials(cfg, 4, master_seed=9)
    big = run_trials(cfg, 8, master_seed=9)
    assert [r.J for r in small] == [r.J for r in big[:4]]
    more = run_trials(cfg, 4, master_seed=9, first_index=4)
    assert [r.J for r in more] == [r.J for r in big[4:]]


def test_threads_do_not_change_results(chain4):
    mdp, target = chain4
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, build_faa(mdp, PAPER_LEARNER, target, 1.0), 5_000, label="faa", delta=1.0)
    a = evaluate(cfg, 16, 3, threads=1, curves=True)
    b = evaluate(cfg, 16, 3, threads=8, curves=True)
    assert stats_csv([a]) == stats_csv([b])
    assert curves_csv(a) == curves_csv(b)


def test_csv_schemas(chain4):
    mdp, target = chain4
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, null_attack(), 50, label="none", delta=0.0)
    st = evaluate(cfg, 3, 0, curves=True)
    lines = stats_csv([st]).splitlines()
    assert lines[0] == EVALUATE_HEADER == "label,delta,trials,T,mean_J,stderr_J"
    assert lines[1].startswith("none,0.0,3,50,")
    curves = curves_csv(st).splitlines()
    assert curves[0] == CURVES_HEADER == "t,mean_cost01,stderr,mean_achieved,stderr"
    assert len(curves) == 51
    rec = run_trial(cfg, 0, 0, full=True)
    rows = trial_csv(rec).splitlines()
    assert rows[0] == TRIAL_HEADER and len(rows) == 51
    with pytest.raises(ValueError):
        trial_csv(run_trial(cfg, 0, 0))
    with pytest.raises(ValueError):
        curves_csv(evaluate(cfg, 2, 0))


def test_sweep(chain4):
    mdp, target = chain4
    with pytest.raises(ValueError):
        sweep([], 3)
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, build_faa(mdp, PAPER_LEARNER, target, 1.0), 2_000)
    one = sweep([cfg], 5, 1)
    assert stats_csv(one) == stats_csv([evaluate(cfg, 5, 1)])


def test_faa_cost_decreases_with_budget(chain4):
    mdp, target = chain4
    means = []
    for delta in (0.1, 0.2, 0.5, 1.0):
        cfg = TrialConfig(mdp, target, PAPER_LEARNER, build_faa(mdp, PAPER_LEARNER, target, delta), 20_000)
        means.append(evaluate(cfg, 30, 0, threads=4).mean_J)
    assert means[0] > means[-1]
    assert means == sorted(means, reverse=True)


def test_config_validation(chain4):
    mdp, target = chain4
    with pytest.raises(ValueError):
        TrialConfig(mdp, target, PAPER_LEARNER, null_attack(), 0)
    small, small_target = build_chain(2)
    with pytest.raises(ValueError):
        TrialConfig(mdp, small_target, PAPER_LEARNER, null_attack(), 10)
    assert math.isnan(TrialConfig(mdp, target, PAPER_LEARNER, null_attack(), 10).delta)
