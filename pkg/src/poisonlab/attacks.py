"""Attack policies: what the attacker adds to each reward."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .certificates import compute_delta3, epsilon_distance, target_gaps
from .envs import PartialPolicy
from .mdp import TabularMdp, value_iteration
from .qlearner import LearnerParams


@dataclass(frozen=True)
class AttackState:
    """What the attacker sees at step t, before the victim updates."""

    s: int
    a: int
    s_next: int
    r: float
    eoe: bool
    q: np.ndarray
    t: int
    alpha: float | None = None  # the victim's step size for this update, if known


def in_target_set(q: np.ndarray, target: PartialPolicy) -> bool:
    """True iff every target state strictly prefers some admitted action."""
    targets = target.target_states
    if targets.size == 0:
        return True
    return bool(np.all(target_gaps(q, target)[targets] < 0))


def surrogate_loss(q: np.ndarray, target: PartialPolicy, eta: float) -> float:
    """Hinge sum of margin violations over target states."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    targets = target.target_states
    if targets.size == 0:
        return 0.0
    gaps = target_gaps(q, target)[targets]
    return float(np.maximum(gaps + eta, 0.0).sum())


def achieved_count(q: np.ndarray, target: PartialPolicy) -> int:
    """Number of target states whose greedy action is admitted."""
    targets = target.target_states
    greedy = np.argmax(q[targets], axis=1)
    return int(target.admitted[targets, greedy].sum())


def clip(delta: float, bound: float) -> float:
    return min(max(delta, -bound), bound)


def greedy_attack(q_row: np.ndarray, a: int, q_next: float, alpha: float, desired: np.ndarray, eta: float) -> float:
    """Poison that makes the visited action obey the desired set by margin eta.

    ``q_next`` is the unpoisoned update value. A desired action is lifted to
    at least ``eta`` above every undesired action; an undesired action is
    pushed to at least ``eta`` below the best desired one. No push is made
    when the inequality already holds.
    """
    if desired[a]:
        if desired.all():
            return 0.0
        rival = float(np.max(q_row[~desired]))
        return max(rival - q_next + eta, 0.0) / alpha
    best = float(np.max(q_row[desired]))
    return min(best - eta - q_next, 0.0) / alpha


class AttackPolicy:
    """Maps an :class:`AttackState` to a poison in [-delta_max, delta_max]."""

    delta_max: float = math.inf
    name = "attack"

    def raw(self, xi: AttackState) -> float:
        raise NotImplementedError

    def __call__(self, xi: AttackState) -> float:
        return clip(self.raw(xi), self.delta_max)

    def spawn(self) -> AttackPolicy:
        """A fresh instance for one trial. Stateless policies return themselves."""
        return self

    def kernel_spec(self):
        """Arrays for the compiled trial loop, or None to use the Python path."""
        return None


class NullAttack(AttackPolicy):
    name = "none"

    def __init__(self, delta_max: float = 0.0):
        self.delta_max = delta_max

    def raw(self, xi):
        return 0.0

    def kernel_spec(self):
        from ._kernels import ATTACK_NONE

        return dict(kind=ATTACK_NONE)


def null_attack() -> NullAttack:
    return NullAttack()


class TableAttack(AttackPolicy):
    """Non-adaptive poison looked up by (s, a)."""

    name = "nonadaptive"

    def __init__(self, table: np.ndarray, delta_max: float, q_shifted: np.ndarray | None = None):
        self.table = np.asarray(table, dtype=float)
        self.delta_max = delta_max
        self.q_shifted = q_shifted

    def raw(self, xi):
        return float(self.table[xi.s, xi.a])

    def kernel_spec(self):
        from ._kernels import ATTACK_TABLE_SA

        return dict(kind=ATTACK_TABLE_SA, table=self.table)


def shifted_q(qstar: np.ndarray, target: PartialPolicy, delta: float, gamma: float) -> np.ndarray:
    """Q* moved up by delta/(1+gamma) on admitted and down on the rest, on target states."""
    shift = delta / (1 + gamma)
    qp = qstar.copy()
    for s in target.target_states:
        qp[s] = np.where(target.admitted[s], qstar[s] + shift, qstar[s] - shift)
    return qp


def build_nonadaptive_attack(mdp: TabularMdp, gamma: float, target: PartialPolicy, delta: float, qstar=None) -> TableAttack:
    """Reward rewrite whose Q-learning fixed point is the shifted Q-table."""
    if qstar is None:
        qstar = value_iteration(mdp, gamma)
    if qstar.shape != target.admitted.shape:
        raise ValueError("target policy does not match the MDP's dimensions")
    d3 = compute_delta3(qstar, gamma, target)
    if delta <= d3:
        warnings.warn(f"delta={delta} does not exceed delta3={d3:.4g}; feasibility is not guaranteed", stacklevel=2)
    qp = shifted_q(qstar, target, delta, gamma)
    v = np.where(mdp.terminal, 0.0, qp.max(axis=1))
    r_new = qp - gamma * (mdp.transition @ v)
    table = r_new - mdp.expected_rewards
    table[mdp.terminal] = 0.0
    return TableAttack(table, delta, q_shifted=qp)


class FastAdaptiveAttack(AttackPolicy):
    """One target state at a time, farthest from the start first.

    While target state ``order[i]`` does not yet have an admitted greedy
    action, the victim is greedily taught ``nu[i]``: the navigation policy
    toward that state, with the target actions kept on it and on every
    earlier state in the order. Once all are achieved, the target policy
    itself is enforced.
    """

    name = "faa"

    def __init__(self, target: PartialPolicy, params: LearnerParams, order, nu, eta: float, delta_max: float):
        self.target = target
        self.params = params
        self.order = np.asarray(order, dtype=np.int64)
        self.nu = np.asarray(nu, dtype=bool)
        self.eta = float(eta)
        self.delta_max = delta_max

    def desired(self, q: np.ndarray) -> np.ndarray:
        """Admitted-action mask currently being taught, shape (S, A).

        A target state counts as achieved only when an admitted action is
        strictly preferred; a tie is not achieved.
        """
        adm = self.target.admitted
        gaps = target_gaps(q[self.order], PartialPolicy(adm[self.order]))
        for i in range(len(self.order)):
            if not gaps[i] < 0:
                return self.nu[i]
        return adm

    def raw(self, xi):
        alpha = self.params.lr(xi.t) if xi.alpha is None else xi.alpha
        boot = 0.0 if xi.eoe else self.params.gamma * float(np.max(xi.q[xi.s_next]))
        q_next = (1.0 - alpha) * float(xi.q[xi.s, xi.a]) + alpha * (xi.r + boot)
        mask = self.desired(xi.q)[xi.s]
        return greedy_attack(xi.q[xi.s], xi.a, q_next, alpha, mask, self.eta)

    def kernel_spec(self):
        from ._kernels import ATTACK_FAA

        return dict(kind=ATTACK_FAA, order=self.order, nu=self.nu, eta=self.eta)


def rank_targets(mdp: TabularMdp, target: PartialPolicy, epsilon: float):
    """Target states by descending expected epsilon-distance from mu0.

    Returns the order and the matching navigation solutions. Ties go to the
    lower state index.
    """
    navs = {}
    keys = []
    for s in target.target_states:
        nav = epsilon_distance(mdp, epsilon, int(s))
        navs[int(s)] = nav
        d = nav.dist
        start = mdp.initial_dist > 0
        mean = math.inf if np.isinf(d[start]).any() else float(mdp.initial_dist[start] @ d[start])
        keys.append((-mean, int(s)))
    order = [s for _, s in sorted(keys)]
    return order, [navs[s] for s in order]


def build_faa(mdp: TabularMdp, params: LearnerParams, target: PartialPolicy, delta: float, eta: float = 0.1) -> FastAdaptiveAttack:
    if eta <= 0:
        raise ValueError("eta must be positive")
    if target.target_states.size == 0:
        raise ValueError("target policy has no target states")
    order, navs = rank_targets(mdp, target, params.epsilon)
    n_states, n_actions = target.admitted.shape
    nu = np.zeros((len(order), n_states, n_actions), dtype=bool)
    for i, nav in enumerate(navs):
        nu[i, np.arange(n_states), nav.policy] = True
        nu[i, mdp.terminal] = True
        for s in order[: i + 1]:
            nu[i, s] = target.admitted[s]
    return FastAdaptiveAttack(target, params, order, nu, eta, delta)
