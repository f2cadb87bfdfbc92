"""Feasibility thresholds and hitting-time quantities for reward poisoning."""

from __future__ import annotations

import math
import warnings
from fractions import Fraction
from dataclasses import dataclass

import numpy as np

from .envs import PartialPolicy
from .mdp import DEFAULT_MAX_ITER, DEFAULT_TOL, ConvergenceError, TabularMdp, greedy_policy, value_iteration

STRONG = "infeasible (strong)"
WEAK = "infeasible (weak)"
FEASIBLE = "Δ3-attack feasible"
UNKNOWN = "unknown region"


def _rows(q: np.ndarray, nonterminal) -> np.ndarray:
    return np.arange(q.shape[0]) if nonterminal is None else np.asarray(nonterminal)


def action_margins(q: np.ndarray) -> np.ndarray:
    """Per state, Q(s, pi(s)) minus the best other action (0 on ties)."""
    if q.shape[1] < 2:
        raise ValueError("margins need at least two actions")
    best = greedy_policy(q)
    rows = np.arange(q.shape[0])
    others = q.copy()
    others[rows, best] = -np.inf
    return q[rows, best] - others.max(axis=1)


def target_gaps(q: np.ndarray, target: PartialPolicy) -> np.ndarray:
    """max_{a not in target} Q - max_{a in target} Q per state; -inf on don't-care states."""
    inside = np.where(target.admitted, q, -np.inf).max(axis=1)
    outside = np.where(target.admitted, -np.inf, q).max(axis=1)
    return outside - inside


def compute_delta1(qstar: np.ndarray, gamma: float, nonterminal=None) -> float:
    """Strong certificate: below this, the victim still learns pi*."""
    margins = action_margins(qstar)[_rows(qstar, nonterminal)]
    return float((1 - gamma) * margins.min() / 2)


def compute_delta2(qstar: np.ndarray, gamma: float, target: PartialPolicy, nonterminal=None) -> float:
    """Weak certificate: below this, the target policy is never enforced."""
    rows = _rows(qstar, nonterminal)
    best_target = np.where(target.admitted, qstar, -np.inf).max(axis=1)
    gaps = qstar.max(axis=1) - best_target
    return float((1 - gamma) * max(gaps[rows].max(), 0.0) / 2)


def compute_delta3(qstar: np.ndarray, gamma: float, target: PartialPolicy) -> float:
    """Above this, the non-adaptive shifted-Q attack is feasible."""
    targets = target.target_states
    if targets.size == 0:
        raise ValueError("target policy has no target states")
    gaps = target_gaps(qstar, target)[targets]
    return float((1 + gamma) / 2 * max(gaps.max(), 0.0))


@dataclass(frozen=True)
class Certificates:
    delta1: float
    delta2: float
    delta3: float
    gamma: float

    def q_band_halfwidth(self, delta: float) -> float:
        return delta / (1 - self.gamma)

    def verdict(self, delta: float) -> str:
        if delta < self.delta1:
            return STRONG
        if delta < self.delta2:
            return WEAK
        if delta > self.delta3:
            return FEASIBLE
        return UNKNOWN


def certify(mdp: TabularMdp, gamma: float, target: PartialPolicy, qstar: np.ndarray | None = None) -> Certificates:
    if qstar is None:
        qstar = value_iteration(mdp, gamma)
    nt = mdp.nonterminal
    return Certificates(
        delta1=compute_delta1(qstar, gamma, nt),
        delta2=compute_delta2(qstar, gamma, target, nt),
        delta3=compute_delta3(qstar, gamma, target),
        gamma=gamma,
    )


# --- epsilon-distances -----------------------------------------------------


@dataclass(frozen=True)
class NavSolution:
    """Expected hitting times to ``goal`` and the policy achieving them."""

    goal: int
    dist: np.ndarray
    policy: np.ndarray


def navigation_kernel(mdp: TabularMdp, goal: int) -> np.ndarray:
    """Transition tensor with entries into terminal states redirected to mu0.

    Entering a terminal state ends the episode and the next step starts from
    mu0, so for hitting-time purposes that mass lands on the reset
    distribution. The goal itself is never redirected.
    """
    P = np.array(mdp.transition)
    for s_term in np.flatnonzero(mdp.terminal):
        if s_term == goal:
            continue
        mass = P[:, :, s_term].copy()
        P[:, :, s_term] = 0.0
        P += mass[:, :, None] * mdp.initial_dist[None, None, :]
    return P


def smoothed_kernel(P: np.ndarray, epsilon: float) -> np.ndarray:
    """Transition tensor of the epsilon-greedy version of each action."""
    n_actions = P.shape[1]
    return (1 - epsilon) * P + epsilon / n_actions * P.sum(axis=1, keepdims=True)


def _proper_states(Pe: np.ndarray, goal: int) -> np.ndarray:
    """States from which some stationary policy reaches goal w.p. 1."""
    n_states = Pe.shape[0]
    support = Pe > 0
    alive = np.ones(n_states, dtype=bool)
    while True:
        # actions whose successors all stay inside the candidate set
        ok = ~np.any(support & ~alive[None, None, :], axis=2)
        ok[goal] = True
        # backward reachability to goal along allowed actions
        reach = np.zeros(n_states, dtype=bool)
        reach[goal] = True
        changed = True
        while changed:
            hits = np.any(support & reach[None, None, :], axis=2) & ok
            new = reach | (hits.any(axis=1) & alive)
            changed = bool((new != reach).any())
            reach = new
        if np.array_equal(reach, alive):
            return alive
        alive = reach


def epsilon_distance(
    mdp: TabularMdp,
    epsilon: float,
    goal: int,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> NavSolution:
    """Shortest expected hitting time to ``goal`` under epsilon-greedy smoothing.

    Unreachable sources get ``inf``. Terminal sources get the mu0-average,
    since occupying one is the same as starting a fresh episode.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    Pe = smoothed_kernel(navigation_kernel(mdp, goal), epsilon)
    n_states, n_actions = Pe.shape[:2]
    proper = _proper_states(Pe, goal)
    ok = ~np.any((Pe > 0) & ~proper[None, None, :], axis=2)
    cost = np.where(ok, 1.0, np.inf)
    v = np.zeros(n_states)
    for _ in range(max_iter):
        qv = cost + Pe @ np.where(proper, v, 0.0)
        v_new = np.where(proper, qv.min(axis=1), np.inf)
        v_new[goal] = 0.0
        change = np.max(np.abs(v_new[proper] - v[proper]), initial=0.0)
        v = v_new
        if change <= tol:
            break
    else:
        raise ConvergenceError(f"epsilon-distance to state {goal} did not converge")
    policy = np.argmin(cost + Pe @ np.where(proper, v, 0.0), axis=1)
    v, policy = _polish(Pe, cost, proper, goal, v, policy)
    if mdp.terminal.any():
        start = float(mdp.initial_dist @ np.where(proper, v, 0.0)) if proper[mdp.initial_dist > 0].all() else np.inf
        for s_term in np.flatnonzero(mdp.terminal):
            if s_term != goal:
                v[s_term] = start
    return NavSolution(goal=goal, dist=v, policy=policy)


def _polish(Pe, cost, proper, goal, v, policy, max_rounds=50):
    """Exact policy evaluation and improvement starting from the VI policy."""
    idx = np.flatnonzero(proper & (np.arange(len(proper)) != goal))
    for _ in range(max_rounds):
        M = Pe[idx, policy[idx]][:, idx]
        try:
            vals = np.linalg.solve(np.eye(len(idx)) - M, np.ones(len(idx)))
        except np.linalg.LinAlgError:
            break
        v_eval = np.where(proper, 0.0, np.inf)
        v_eval[idx] = vals
        qv = cost + Pe @ np.where(proper, v_eval, 0.0)
        improved = policy.copy()
        best = qv.min(axis=1)
        for s in idx:
            if qv[s, policy[s]] > best[s] + 1e-12 * max(1.0, abs(best[s])):
                improved[s] = int(np.argmin(qv[s]))
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            break
        v = v_eval
        if np.array_equal(improved, policy):
            break
        policy = improved
    return v, policy


def epsilon_diameter(mdp: TabularMdp, epsilon: float) -> float:
    """Largest epsilon-distance over ordered pairs of distinct non-terminal states."""
    states = mdp.nonterminal
    best = 0.0
    unreachable = 0
    for goal in states:
        dist = epsilon_distance(mdp, epsilon, int(goal)).dist
        for s in states:
            if s == goal:
                continue
            if math.isinf(dist[s]):
                unreachable += 1
            else:
                best = max(best, float(dist[s]))
    if unreachable:
        warnings.warn(f"{unreachable} state pairs are unreachable; excluded from the diameter", stacklevel=2)
    return best


# --- covering time on the chain --------------------------------------------


def _check_epsilon_open(epsilon: float):
    if not 0 < epsilon < 1:
        raise ValueError("covering time needs epsilon in (0, 1)")


def chain_covering_time(n: int, epsilon: float) -> float:
    """Expected steps for the epsilon-greedy target policy to reach x1 from xn.

    Exact solution of the birth-death recursion with p = epsilon/2: the
    walk steps left with probability p and otherwise moves right, where the
    right end (goal entry followed by a reset) holds it in place. With
    r = (1-p)/p and m = n-1 the hitting time is
    ``[(1-p)/(1-2p) * (r**m - 1) - m] / (1-2p)``.
    """
    _check_epsilon_open(epsilon)
    p = epsilon / 2
    m = n - 1
    if m <= 0:
        return 0.0
    r = (1 - p) / p
    return ((1 - p) / (1 - 2 * p) * (r**m - 1) - m) / (1 - 2 * p)


def chain_covering_time_printed(n: int, epsilon: float) -> float:
    """The published closed form ``p(1+p(1-2p))/(1-2p)^2 [r^(n-1) - 1]``.

    Kept for comparison only: it has the right exponential rate but does not
    solve its own recursion (n=2 gives 1.16 instead of 1/p = 20).
    """
    _check_epsilon_open(epsilon)
    p = epsilon / 2
    return p * (1 + p * (1 - 2 * p)) / (1 - 2 * p) ** 2 * (((1 - p) / p) ** (n - 1) - 1)


def chain_covering_time_linear(n: int, epsilon: float) -> float:
    """Direct solve of the covering-time recursion (test oracle).

    With W_j the expected time to reach x1 from x_j: W_1 = 0,
    W_j = 1 + p W_{j-1} + (1-p) W_{j+1} for 1 < j < n, and
    W_n = 1 + p W_{n-1} + (1-p) W_n since moving right from x_n enters the
    goal and resets to x_n. The tridiagonal system is eliminated in exact
    rational arithmetic, as the values grow like ((1-p)/p)**n and a float
    solve loses digits.
    """
    _check_epsilon_open(epsilon)
    if n <= 1:
        return 0.0
    p = Fraction(epsilon) / 2
    q = 1 - p
    # W_j = a_j + b_j W_{j-1}, eliminated from the right end down to j = 2
    coef = {n: (1 / p, Fraction(1))}
    for j in range(n - 1, 1, -1):
        a, b = coef[j + 1]
        denom = 1 - q * b
        coef[j] = ((1 + q * a) / denom, p / denom)
    w = Fraction(0)
    for j in range(2, n + 1):
        a, b = coef[j]
        w = a + b * w
    return float(w)


# --- implicit Delta_4 -------------------------------------------------------


def estimate_delta4(
    mdp: TabularMdp,
    target: PartialPolicy,
    params,
    trials: int = 100,
    horizon: int = 10_000,
    master_seed: int = 0,
    eta: float = 0.1,
    threads: int = 1,
) -> float:
    """Largest |delta| the unclipped fast adaptive attack ever emits.

    Any attack budget at or above this value leaves the clip inactive on
    the simulated runs.
    """
    from .attacks import build_faa
    from .harness import TrialConfig, run_trials

    policy = build_faa(mdp, params, target, delta=math.inf, eta=eta)
    cfg = TrialConfig(mdp=mdp, target=target, params=params, attack=policy, T=horizon, eta=eta)
    records = run_trials(cfg, trials, master_seed, threads=threads)
    failed = [r.seed_index for r in records if not r.final_in_target]
    if failed:
        raise RuntimeError(f"{len(failed)} trials never reached the target set within {horizon} steps")
    return max(r.max_abs_delta for r in records)
