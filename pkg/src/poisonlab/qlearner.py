"""The victim: epsilon-greedy tabular Q-learning.

All randomness of one learning run comes from a pre-drawn ``(T, 4)`` block of
uniforms, one row per step: exploration coin, random action, transition, and
episode reset. The compiled kernels in :mod:`poisonlab._kernels` consume the
same rows, so both paths produce identical trajectories for the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp

U_EXPLORE, U_ACTION, U_TRANSITION, U_RESET = range(4)
NOISE_WIDTH = 4


@dataclass(frozen=True)
class LearningRate:
    """``constant``: alpha = value. ``polynomial``: alpha = (1/(1+k))**value.

    For the polynomial schedule ``counter`` picks k: ``step`` is the global
    step index t, ``visits`` the number of earlier updates of the same
    (s, a) pair.
    """

    kind: str
    value: float
    counter: str = "step"

    def __post_init__(self):
        if self.kind == "constant":
            if not 0 < self.value <= 1:
                raise ValueError(f"constant learning rate must be in (0, 1], got {self.value}")
        elif self.kind == "polynomial":
            if not 0.5 < self.value <= 1:
                raise ValueError(f"polynomial exponent must be in (1/2, 1], got {self.value}")
        else:
            raise ValueError(f"unknown learning-rate kind {self.kind!r}")
        if self.counter not in ("step", "visits"):
            raise ValueError(f"counter must be 'step' or 'visits', got {self.counter!r}")

    @classmethod
    def constant(cls, alpha: float) -> LearningRate:
        return cls("constant", float(alpha))

    @classmethod
    def polynomial(cls, omega: float, counter: str = "step") -> LearningRate:
        return cls("polynomial", float(omega), counter)

    @property
    def code(self) -> int:
        if self.kind == "constant":
            return 0
        return 1 if self.counter == "step" else 2

    def __call__(self, t: int, visits: int = 0) -> float:
        if self.kind == "constant":
            return self.value
        k = t if self.counter == "step" else visits
        return (1.0 / (1.0 + k)) ** self.value

    def __str__(self):
        if self.kind == "polynomial" and self.counter == "visits":
            return f"polynomial({self.value:g}, visits)"
        return f"{self.kind}({self.value:g})"

    @classmethod
    def parse(cls, text: str) -> LearningRate:
        """``constant(0.9)``, ``polynomial(0.77)`` or ``polynomial(0.77, visits)``; a bare number is constant."""
        text = text.strip()
        if "(" not in text:
            return cls.constant(float(text))
        kind, rest = text.split("(", 1)
        args = [a.strip() for a in rest.rstrip(")").split(",")]
        if len(args) == 1:
            return cls(kind.strip(), float(args[0]))
        if len(args) == 2:
            return cls(kind.strip(), float(args[0]), args[1])
        raise ValueError(f"cannot parse learning rate {text!r}")


@dataclass(frozen=True)
class LearnerParams:
    epsilon: float = 0.1
    gamma: float = 0.9
    lr: LearningRate = LearningRate.constant(0.9)
    q0: float | np.ndarray = 0.0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be in [0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")

    def initial_q(self, mdp: TabularMdp) -> np.ndarray:
        q = np.zeros((mdp.n_states, mdp.n_actions))
        q[...] = self.q0
        if not np.all(np.isfinite(q)):
            raise ValueError("q0 must be finite")
        return q


PAPER_LEARNER = LearnerParams(epsilon=0.1, gamma=0.9, lr=LearningRate.constant(0.9))


@dataclass
class LearnerState:
    q: np.ndarray
    s: int
    t: int = 0
    episode_step: int = 0
    visits: np.ndarray | None = None

    def __post_init__(self):
        if self.visits is None:
            self.visits = np.zeros(self.q.shape, dtype=np.int64)

    def alpha(self, lr: LearningRate, s: int, a: int) -> float:
        return lr(self.t, int(self.visits[s, a]))


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    s_next: int
    r: float
    eoe: bool
    truncated: bool = False

    @property
    def resets(self) -> bool:
        """True when the next step starts a fresh episode from mu0."""
        return self.eoe or self.truncated


def draw_noise(rng: np.random.Generator, n_steps: int) -> tuple[float, np.ndarray]:
    """Uniform for the initial state, then one noise row per step."""
    u0 = rng.random()
    return u0, rng.random((n_steps, NOISE_WIDTH))


def sample_cdf(cdf: np.ndarray, u: float) -> int:
    """First index whose cumulative probability exceeds u."""
    i = int(np.searchsorted(cdf, u, side="right"))
    n = cdf.shape[0]
    if i >= n:
        i = n - 1
    # skip zero-probability tail entries that rounding might select
    while i > 0 and cdf[i] == cdf[i - 1]:
        i -= 1
    return i


def transition_cdfs(mdp: TabularMdp) -> tuple[np.ndarray, np.ndarray]:
    return np.cumsum(mdp.transition, axis=2), np.cumsum(mdp.initial_dist)


def greedy_action(q_row: np.ndarray) -> int:
    return int(np.argmax(q_row))


def epsilon_greedy(q_row: np.ndarray, epsilon: float, u_explore: float, u_action: float) -> int:
    if u_explore < epsilon:
        n = q_row.shape[0]
        return min(int(u_action * n), n - 1)
    return greedy_action(q_row)


def select_action(ls: LearnerState, params: LearnerParams, rng: np.random.Generator) -> int:
    """epsilon-greedy action at the learner's current state."""
    return epsilon_greedy(ls.q[ls.s], params.epsilon, rng.random(), rng.random())


def bootstrap(q: np.ndarray, tr: Transition, gamma: float) -> float:
    return 0.0 if tr.eoe else gamma * float(np.max(q[tr.s_next]))


def hypothetical_next_q(ls: LearnerState, params: LearnerParams, tr: Transition) -> float:
    """The value ``q_update`` would write for this transition with zero poison."""
    alpha = ls.alpha(params.lr, tr.s, tr.a)
    return (1.0 - alpha) * float(ls.q[tr.s, tr.a]) + alpha * (tr.r + bootstrap(ls.q, tr, params.gamma))


def q_update(ls: LearnerState, params: LearnerParams, tr: Transition, delta: float = 0.0) -> LearnerState:
    """In-place Q-learning update on the poisoned reward ``tr.r + delta``."""
    alpha = ls.alpha(params.lr, tr.s, tr.a)
    boot = bootstrap(ls.q, tr, params.gamma)
    ls.q[tr.s, tr.a] = (1.0 - alpha) * float(ls.q[tr.s, tr.a]) + alpha * ((tr.r + delta) + boot)
    ls.visits[tr.s, tr.a] += 1
    ls.t += 1
    return ls


class Victim:
    """One Q-learning run inside an MDP, driven step by step.

    Each step is split in two so an attacker can look at the transition
    before the update: :meth:`observe` samples the action and environment
    response, :meth:`learn` applies the (poisoned) update and advances,
    resetting from mu0 at the end of an episode.
    """

    def __init__(self, mdp: TabularMdp, params: LearnerParams, u0: float, noise: np.ndarray):
        self.mdp = mdp
        self.params = params
        self.noise = noise
        self._cdf_p, self._cdf_mu0 = transition_cdfs(mdp)
        s0 = sample_cdf(self._cdf_mu0, u0)
        self.state = LearnerState(q=params.initial_q(mdp), s=s0)
        self.pending: Transition | None = None

    @property
    def horizon(self) -> int:
        return self.noise.shape[0]

    def observe(self) -> Transition:
        ls = self.state
        if ls.t >= self.horizon:
            raise IndexError("noise exhausted: the run's horizon is over")
        u = self.noise[ls.t]
        a = epsilon_greedy(ls.q[ls.s], self.params.epsilon, u[U_EXPLORE], u[U_ACTION])
        s2 = sample_cdf(self._cdf_p[ls.s, a], u[U_TRANSITION])
        r = float(self.mdp.reward[ls.s, a, s2])
        # hitting the episode cap resets the walk but is not a terminal
        # state, so the update still bootstraps through s2
        eoe = bool(self.mdp.terminal[s2])
        truncated = not eoe and ls.episode_step + 1 >= self.mdp.episode_cap
        self.pending = Transition(ls.s, a, s2, r, eoe, truncated)
        return self.pending

    def learn(self, delta: float) -> None:
        tr = self.pending
        if tr is None:
            raise RuntimeError("learn() called before observe()")
        ls = self.state
        u_reset = self.noise[ls.t, U_RESET]
        q_update(ls, self.params, tr, delta)
        if tr.resets:
            ls.s = sample_cdf(self._cdf_mu0, u_reset)
            ls.episode_step = 0
        else:
            ls.s = tr.s_next
            ls.episode_step += 1
        self.pending = None
