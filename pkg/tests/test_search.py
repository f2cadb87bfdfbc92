import numpy as np
import pytest

from poisonlab.attacks import build_faa, null_attack
from poisonlab.envs import build_chain
from poisonlab.harness import TrialConfig, run_trial
from poisonlab.mdp import TabularMdp
from poisonlab.qlearner import PAPER_LEARNER
from poisonlab.search import (
    ADAPTIVE,
    NONADAPTIVE,
    AttackEnv,
    ParamAttackPolicy,
    format_policy,
    load_policy,
    parse_policy,
    rollout_objective,
    save_policy,
    search,
)


@pytest.fixture(scope="module")
def chain4():
    mdp, target = build_chain(4)
    # a short cap exercises truncation inside the short horizons used here
    return TabularMdp(mdp.transition, mdp.reward, mdp.initial_dist, mdp.terminal, episode_cap=9), target


def _drive(env, policy, seed):
    xi, loss = env.reset(seed, 0)
    total = 0.0
    while xi is not None:
        total += loss
        xi, loss = env.step(policy(xi))
    return total


def test_env_reproduces_harness_trial(chain4):
    mdp, target = chain4
    faa = build_faa(mdp, PAPER_LEARNER, target, 1.0)
    env = AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 1_500)
    total = _drive(env, faa, 4)
    rec = run_trial(env.trial_config(faa), 4, 0)
    np.testing.assert_array_equal(env.victim.state.q, rec.final_q)
    assert total == pytest.approx(rec.sum_rho, abs=1e-9)


def test_zero_poison_is_the_unattacked_run(chain4):
    mdp, target = chain4
    env = AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 500)
    _drive(env, null_attack(), 1)
    rec = run_trial(TrialConfig(mdp, target, PAPER_LEARNER, null_attack(), 500), 1, 0)
    np.testing.assert_array_equal(env.victim.state.q, rec.final_q)


def test_one_step_changes_one_entry(chain4):
    mdp, target = chain4
    env = AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 10)
    xi, _ = env.reset(0, 0)
    before = env.victim.state.q.copy()
    env.step(0.3)
    assert np.count_nonzero(env.victim.state.q != before) <= 1
    with pytest.raises(ValueError):
        xi.q[0, 0] = 1.0  # the attacker's view is read-only


def test_clamping_and_horizon(chain4):
    mdp, target = chain4
    env = AttackEnv(mdp, PAPER_LEARNER, target, 0.5, 3)
    with pytest.raises(RuntimeError):
        env.step(0.0)
    env.reset(0, 0)
    env.step(2.0)
    env.step(-0.1)
    assert env.n_clamped == 1
    xi, loss = env.step(-3.0)
    assert xi is None and env.done and env.n_clamped == 2 and loss >= 0
    with pytest.raises(RuntimeError):
        env.step(0.0)


def test_faa_loss_reaches_zero(chain4):
    mdp, target = chain4
    faa = build_faa(mdp, PAPER_LEARNER, target, 1.0)
    env = AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 3_000)
    xi, loss = env.reset(0, 0)
    while xi is not None:
        xi, loss = env.step(faa(xi))
    assert loss == 0.0


def test_zero_theta_reproduces_base(chain4):
    mdp, target = chain4
    faa = build_faa(mdp, PAPER_LEARNER, target, 1.0)
    pol = ParamAttackPolicy.zeros(ADAPTIVE, mdp, target, 1.0, base=faa)
    a = run_trial(TrialConfig(mdp, target, PAPER_LEARNER, pol, 2_000), 0, 0, full=True)
    b = run_trial(TrialConfig(mdp, target, PAPER_LEARNER, faa, 2_000), 0, 0, full=True)
    np.testing.assert_array_equal(a.delta, b.delta)
    assert rollout_objective(pol, AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 2_000), range(3)) == pytest.approx(
        rollout_objective(faa, AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 2_000), range(3))
    )


@pytest.mark.parametrize("mode", [NONADAPTIVE, ADAPTIVE])
def test_param_policy_paths_agree(chain4, mode):
    mdp, target = chain4
    rng = np.random.default_rng(0)
    base = build_faa(mdp, PAPER_LEARNER, target, 1.0) if mode == ADAPTIVE else None
    pol = ParamAttackPolicy.zeros(mode, mdp, target, 0.7, base=base)
    pol = pol.with_theta(rng.normal(size=pol.theta.shape))
    cfg = TrialConfig(mdp, target, PAPER_LEARNER, pol, 1_500)
    a = run_trial(cfg, 0, 0, full=True)
    b = run_trial(cfg, 0, 0, full=True, fast=False)
    np.testing.assert_array_equal(a.final_q, b.final_q)
    assert np.abs(a.delta).max() <= 0.7


def test_policy_validation(chain4):
    mdp, target = chain4
    with pytest.raises(ValueError):
        ParamAttackPolicy("bogus", np.zeros((5, 5)), 1.0, target)
    with pytest.raises(ValueError):
        ParamAttackPolicy(ADAPTIVE, np.zeros((5, 2, 5)), 1.0, target)
    with pytest.raises(ValueError):
        ParamAttackPolicy(NONADAPTIVE, np.zeros((5, 2, 5)), 1.0, target, base=build_faa(mdp, PAPER_LEARNER, target, 1.0))


def test_serialization_round_trip(chain4, tmp_path):
    mdp, target = chain4
    rng = np.random.default_rng(2)
    faa = build_faa(mdp, PAPER_LEARNER, target, 1.0)
    for pol in (
        ParamAttackPolicy(ADAPTIVE, rng.normal(size=(5, 5)), 1.0, target, base=faa),
        ParamAttackPolicy(NONADAPTIVE, rng.normal(size=(5, 2, 5)), 0.2, target),
    ):
        path = tmp_path / "p.txt"
        save_policy(pol, path)
        back = load_policy(path, mdp, target, PAPER_LEARNER)
        np.testing.assert_array_equal(back.theta, pol.theta)
        assert back.mode == pol.mode and back.delta_max == pol.delta_max
        assert (back.base is None) == (pol.base is None)
    text = format_policy(pol).replace(" v1", " v9")
    with pytest.raises(ValueError):
        parse_policy(text, mdp, target, PAPER_LEARNER)
    with pytest.raises(ValueError):
        parse_policy("hello\n", mdp, target, PAPER_LEARNER)


def test_search_is_elitist(chain4):
    mdp, target = chain4
    env = AttackEnv(mdp, PAPER_LEARNER, target, 1.0, 400)
    faa = build_faa(mdp, PAPER_LEARNER, target, 1.0)
    init = ParamAttackPolicy.zeros(ADAPTIVE, mdp, target, 1.0, base=faa)
    init_obj = rollout_objective(init, env, range(4))
    res = search(env, ADAPTIVE, init=init, budget=3, seeds=range(4), population=8, rng=np.random.default_rng(0))
    assert res.objective <= init_obj
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert res.objective == pytest.approx(rollout_objective(res.policy, env, range(4)))
    assert res.objective >= 0
    with pytest.raises(ValueError):
        search(env, NONADAPTIVE, init=init, budget=1)
    with pytest.raises(ValueError):
        search(env, ADAPTIVE, budget=0)
