import numpy as np
import pytest

from poisonlab.envs import LEFT, RIGHT, build_chain
from poisonlab.mdp import (
    ConvergenceError,
    TabularMdp,
    bellman_backup,
    bellman_residual,
    expected_reward,
    format_mdp_text,
    greedy_policy,
    load_mdp,
    parse_mdp_text,
    value_iteration,
)


def chain_values_by_hand(n, gamma=0.9):
    """V(x_n) = 0.9, V(x_k) = -0.1 + gamma V(x_{k+1}); Q(x1, L) = -0.1 + gamma V(x1)."""
    v = np.zeros(n)
    v[n - 1] = -0.1 + 1.0
    for k in range(n - 2, -1, -1):
        v[k] = -0.1 + gamma * v[k + 1]
    return v


def test_chain4_values_match_hand_recursion():
    mdp, _ = build_chain(4)
    q = value_iteration(mdp, 0.9)
    v = q[:4].max(axis=1)
    np.testing.assert_allclose(v, [0.3851, 0.539, 0.71, 0.9], atol=1e-9)
    np.testing.assert_allclose(v, chain_values_by_hand(4), atol=1e-9)
    assert q[0, LEFT] == pytest.approx(0.24659, abs=1e-9)
    np.testing.assert_array_equal(q[4], 0.0)


def test_chain2_q_x1_right():
    mdp, _ = build_chain(2)
    q = value_iteration(mdp, 0.9)
    assert q[0, RIGHT] == pytest.approx(0.71, abs=1e-9)


def _zero_mdp(n_states=3, n_actions=2):
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return TabularMdp(P, np.zeros_like(P), np.ones(n_states) / n_states, np.zeros(n_states, bool))


def test_zero_rewards_give_zero_q():
    mdp = _zero_mdp()
    np.testing.assert_array_equal(value_iteration(mdp, 0.9), 0.0)
    assert bellman_residual(mdp, 0.9, np.zeros((3, 2))) == 0.0
    assert expected_reward(mdp, 1, 1) == 0.0


def test_single_absorbing_state():
    # a lone terminal state cannot carry mu0 mass, so pair it with a start state
    P = np.zeros((2, 1, 2))
    P[:, 0, 1] = 1.0
    mdp = TabularMdp(P, np.zeros_like(P), [1.0, 0.0], [False, True])
    np.testing.assert_array_equal(value_iteration(mdp, 0.9), 0.0)


def test_greedy_policy_ties_and_strict_max():
    mdp, _ = build_chain(4)
    pi = greedy_policy(value_iteration(mdp, 0.9))
    np.testing.assert_array_equal(pi[:4], RIGHT)
    np.testing.assert_array_equal(greedy_policy(np.zeros((5, 3))), 0)
    q = np.random.default_rng(0).normal(size=(4, 1))
    np.testing.assert_array_equal(greedy_policy(np.hstack([q, q + 1])), 1)


def test_expected_reward_examples():
    mdp, _ = build_chain(4)
    assert expected_reward(mdp, 0, LEFT) == pytest.approx(-0.1)
    assert expected_reward(mdp, 3, RIGHT) == pytest.approx(0.9)


def test_bellman_residual_of_shift():
    mdp, _ = build_chain(4)
    q = value_iteration(mdp, 0.9)
    assert bellman_residual(mdp, 0.9, q) <= 1e-9
    # a constant shift c on non-terminal rows moves the backup by gamma*c
    # except on transitions into G, so the residual is at least c(1-gamma)
    c = 0.5
    qc = q.copy()
    qc[mdp.nonterminal] += c
    res = bellman_residual(mdp, 0.9, qc)
    assert res >= c * (1 - 0.9) - 1e-9


def test_bellman_backup_zeroes_terminal_rows():
    mdp, _ = build_chain(3)
    out = bellman_backup(mdp, 0.9, np.ones((4, 2)))
    np.testing.assert_array_equal(out[3], 0.0)


def test_validation_errors():
    P = np.zeros((2, 1, 2))
    P[:, 0, 0] = 0.5
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros_like(P), [1, 0], [False, False])
    P[:, 0, 1] = 0.5
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros((2, 2, 2)), [1, 0], [False, False])
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros_like(P), [0.5, 0.4], [False, False])
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros_like(P), [0, 1], [False, True])
    with pytest.raises(ValueError):
        TabularMdp(P, np.zeros_like(P), [1, 0], [False, False], episode_cap=0)


def test_value_iteration_bad_gamma_and_iteration_cap():
    mdp, _ = build_chain(4)
    with pytest.raises(ValueError):
        value_iteration(mdp, 1.0)
    with pytest.raises(ConvergenceError):
        value_iteration(mdp, 0.99, tol=1e-15, max_iter=3)


def test_text_format_round_trip(tmp_path):
    mdp, _ = build_chain(3)
    text = format_mdp_text(mdp)
    assert text.startswith("states 4 actions 2 cap 100")
    back = parse_mdp_text(text)
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    np.testing.assert_array_equal(back.terminal, mdp.terminal)
    path = tmp_path / "m.txt"
    path.write_text(text)
    assert load_mdp(path).episode_cap == 100


def test_text_format_errors():
    with pytest.raises(ValueError):
        parse_mdp_text("states 2 actions 1 cap 5\nmu0 1 0\nterminal 0 0\nP 0 0 5 1.0\n")
    with pytest.raises(ValueError):
        parse_mdp_text("bogus\n")
