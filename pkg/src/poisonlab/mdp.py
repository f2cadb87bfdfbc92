"""Finite MDPs and exact dynamic-programming solvers."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_TOL = 1e-9
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 1_000_000


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with an episode cap.

    ``transition[s, a, s2]`` and ``reward[s, a, s2]`` are dense tables.
    Terminal states end the episode on entry; the solvers treat them as
    absorbing with zero value.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    terminal: np.ndarray
    episode_cap: int = 100
    action_names: tuple[str, ...] | None = None
    state_names: tuple[str, ...] | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        mu0 = np.array(self.initial_dist, dtype=float)
        term = np.array(self.terminal, dtype=bool)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape:
            raise ValueError(f"reward shape {R.shape} != transition shape {P.shape}")
        n_states = P.shape[0]
        if mu0.shape != (n_states,) or term.shape != (n_states,):
            raise ValueError("initial_dist and terminal must have length n_states")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if not np.allclose(P.sum(axis=2), 1.0, atol=PROB_TOL, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial_dist must be a probability vector")
        if np.any(mu0[term] > 0):
            raise ValueError("initial_dist puts mass on a terminal state")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if int(self.episode_cap) < 1:
            raise ValueError("episode_cap must be >= 1")
        for arr in (P, R, mu0, term):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "initial_dist", mu0)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "episode_cap", int(self.episode_cap))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def nonterminal(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal)

    @property
    def expected_rewards(self) -> np.ndarray:
        """Table of E[R(s, a, s')] under P, shape (S, A)."""
        if "rbar" not in self._cache:
            rbar = np.einsum("ijk,ijk->ij", self.transition, self.reward)
            rbar.setflags(write=False)
            self._cache["rbar"] = rbar
        return self._cache["rbar"]

    def state_label(self, s: int) -> str:
        return self.state_names[s] if self.state_names else str(s)

    def action_label(self, a: int) -> str:
        return self.action_names[a] if self.action_names else str(a)

    def unreachable_pairs(self) -> list[tuple[int, int]]:
        """(s, a) pairs that a uniformly random policy never visits from mu0."""
        seen = np.zeros(self.n_states, dtype=bool)
        queue = deque(np.flatnonzero(self.initial_dist > 0).tolist())
        seen[list(queue)] = True
        while queue:
            s = queue.popleft()
            if self.terminal[s]:
                # entering a terminal state resets the episode
                nxt = np.flatnonzero(self.initial_dist > 0)
            else:
                nxt = np.flatnonzero(self.transition[s].sum(axis=0) > 0)
            for s2 in nxt:
                if not seen[s2]:
                    seen[s2] = True
                    queue.append(s2)
        return [(s, a) for s in self.nonterminal if not seen[s] for a in range(self.n_actions)]

    def check_reachability(self) -> bool:
        missing = self.unreachable_pairs()
        if missing:
            warnings.warn(
                f"{len(missing)} state-action pairs are never visited by a uniform policy",
                stacklevel=2,
            )
        return not missing


def bellman_backup(mdp: TabularMdp, gamma: float, q: np.ndarray) -> np.ndarray:
    """One application of the Bellman optimality operator."""
    v = q.max(axis=1)
    v = np.where(mdp.terminal, 0.0, v)
    out = mdp.expected_rewards + gamma * (mdp.transition @ v)
    out[mdp.terminal] = 0.0
    return out


def value_iteration(
    mdp: TabularMdp,
    gamma: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Optimal action values Q* with max-norm Bellman residual <= tol."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    stop = tol * (1 - gamma) / gamma
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        q_next = bellman_backup(mdp, gamma, q)
        change = np.max(np.abs(q_next - q))
        q = q_next
        if change <= stop:
            return q
    raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Per-state argmax, ties to the lowest action index."""
    return np.argmax(q, axis=1)


def expected_reward(mdp: TabularMdp, s: int, a: int) -> float:
    return float(mdp.transition[s, a] @ mdp.reward[s, a])


def bellman_residual(mdp: TabularMdp, gamma: float, q: np.ndarray) -> float:
    return float(np.max(np.abs(q - bellman_backup(mdp, gamma, q))))


# --- text format -----------------------------------------------------------


def parse_mdp_text(text: str) -> TabularMdp:
    """Parse the line-oriented MDP format.

    ::

        states 3 actions 2 cap 50
        mu0 1 0 0
        terminal 0 0 1
        P 0 1 1 1.0
        R 0 1 1 -0.1

    Unlisted probabilities and rewards are zero. ``#`` starts a comment.
    """
    P = R = mu0 = term = None
    cap = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "states":
                if len(tok) != 6 or tok[2] != "actions" or tok[4] != "cap":
                    raise ValueError("expected 'states N actions M cap H'")
                n, m, cap = int(tok[1]), int(tok[3]), int(tok[5])
                P = np.zeros((n, m, n))
                R = np.zeros((n, m, n))
            elif P is None:
                raise ValueError("header line must come first")
            elif tok[0] == "mu0":
                mu0 = np.array([float(x) for x in tok[1:]])
            elif tok[0] == "terminal":
                term = np.array([int(x) for x in tok[1:]], dtype=bool)
            elif tok[0] in ("P", "R"):
                if len(tok) != 5:
                    raise ValueError(f"expected '{tok[0]} s a s2 value'")
                s, a, s2 = int(tok[1]), int(tok[2]), int(tok[3])
                (P if tok[0] == "P" else R)[s, a, s2] = float(tok[4])
            else:
                raise ValueError(f"unknown directive {tok[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if P is None or mu0 is None or term is None:
        raise ValueError("missing header, mu0 or terminal line")
    return TabularMdp(P, R, mu0, term, episode_cap=cap)


def format_mdp_text(mdp: TabularMdp) -> str:
    lines = [
        f"states {mdp.n_states} actions {mdp.n_actions} cap {mdp.episode_cap}",
        "mu0 " + " ".join(repr(float(x)) for x in mdp.initial_dist),
        "terminal " + " ".join(str(int(x)) for x in mdp.terminal),
    ]
    for s, a, s2 in zip(*np.nonzero(mdp.transition)):
        lines.append(f"P {s} {a} {s2} {float(mdp.transition[s, a, s2])!r}")
    for s, a, s2 in zip(*np.nonzero(mdp.reward)):
        lines.append(f"R {s} {a} {s2} {float(mdp.reward[s, a, s2])!r}")
    return "\n".join(lines) + "\n"


def load_mdp(path: str | Path) -> TabularMdp:
    return parse_mdp_text(Path(path).read_text())
