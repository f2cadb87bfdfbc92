"""Benchmark environments: the twisted chain and grid worlds."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .mdp import TabularMdp

LEFT, RIGHT = 0, 1
UP, DOWN, GRID_LEFT, GRID_RIGHT = 0, 1, 2, 3
GRID_MOVES = {UP: (0, -1), DOWN: (0, 1), GRID_LEFT: (-1, 0), GRID_RIGHT: (1, 0)}
GRID_ACTION_CODES = {"U": UP, "D": DOWN, "L": GRID_LEFT, "R": GRID_RIGHT}

STEP_REWARD = -0.1
GOAL_BONUS = 1.0
CHAIN_CAP = 100
GRID_CAP = 400


class PartialPolicy:
    """Per-state admitted action sets, stored as a boolean (S, A) mask.

    A state whose row admits every action is a don't-care state.
    """

    def __init__(self, admitted):
        mask = np.array(admitted, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("admitted mask must be 2-D (S, A)")
        if not mask.any(axis=1).all():
            raise ValueError("every state must admit at least one action")
        mask.setflags(write=False)
        self.admitted = mask

    @classmethod
    def from_actions(cls, n_states, n_actions, actions: dict[int, int | set[int]]):
        mask = np.ones((n_states, n_actions), dtype=bool)
        for s, acts in actions.items():
            acts = {acts} if isinstance(acts, (int, np.integer)) else set(acts)
            mask[s] = False
            mask[s, sorted(acts)] = True
        return cls(mask)

    @classmethod
    def from_policy(cls, policy, n_actions):
        """Singleton sets {policy[s]} on every state."""
        policy = np.asarray(policy)
        mask = np.zeros((len(policy), n_actions), dtype=bool)
        mask[np.arange(len(policy)), policy] = True
        return cls(mask)

    @property
    def n_states(self) -> int:
        return self.admitted.shape[0]

    @property
    def n_actions(self) -> int:
        return self.admitted.shape[1]

    @property
    def target_states(self) -> np.ndarray:
        """S-dagger: states whose admitted set is a strict subset of A."""
        return np.flatnonzero(~self.admitted.all(axis=1))

    def actions(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.admitted[s])

    def __eq__(self, other):
        return isinstance(other, PartialPolicy) and np.array_equal(self.admitted, other.admitted)

    def __repr__(self):
        return f"PartialPolicy(targets={self.target_states.tolist()})"


def build_chain(n_nonabsorbing: int, episode_cap: int = CHAIN_CAP) -> tuple[TabularMdp, PartialPolicy]:
    """Twisted chain x1..xn with an absorbing goal G right of xn.

    Actions are LEFT=0, RIGHT=1. Every move costs 0.1; entering G adds +1.
    Episodes start at xn. The target policy asks for LEFT at x1 and RIGHT
    everywhere else.
    """
    n = int(n_nonabsorbing)
    if n < 2:
        raise ValueError("chain needs at least 2 non-absorbing states")
    goal = n
    S = n + 1
    P = np.zeros((S, 2, S))
    R = np.zeros((S, 2, S))
    for s in range(n):
        left = max(s - 1, 0)
        right = s + 1
        P[s, LEFT, left] = 1.0
        P[s, RIGHT, right] = 1.0
        R[s, LEFT, left] = STEP_REWARD
        R[s, RIGHT, right] = STEP_REWARD + (GOAL_BONUS if right == goal else 0.0)
    P[goal, :, goal] = 1.0
    mu0 = np.zeros(S)
    mu0[n - 1] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[goal] = True
    names = tuple(f"x{i + 1}" for i in range(n)) + ("G",)
    mdp = TabularMdp(P, R, mu0, terminal, episode_cap, action_names=("L", "R"), state_names=names)
    target = PartialPolicy.from_actions(S, 2, {0: LEFT, **{s: RIGHT for s in range(1, n)}})
    return mdp, target


@dataclass
class GridSpec:
    width: int
    height: int
    start: tuple[int, int]
    goal: tuple[int, int]
    step_reward: float = STEP_REWARD
    goal_reward: float = GOAL_BONUS
    target_arrows: list[tuple[tuple[int, int], int]] = field(default_factory=list)
    episode_cap: int = GRID_CAP

    def validate(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        cells = [self.start, self.goal] + [c for c, _ in self.target_arrows]
        for x, y in cells:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"cell ({x}, {y}) out of bounds")
        if tuple(self.start) == tuple(self.goal):
            raise ValueError("start and goal must differ")
        for cell, a in self.target_arrows:
            if a not in GRID_MOVES:
                raise ValueError(f"bad arrow action {a}")
            if tuple(cell) == tuple(self.goal):
                raise ValueError("arrows cannot sit on the goal")

    def index(self, x: int, y: int) -> int:
        return y * self.width + x


def build_gridworld(spec: GridSpec) -> tuple[TabularMdp, PartialPolicy]:
    """Deterministic grid with U/D/L/R moves; y grows downward."""
    spec.validate()
    W, H = spec.width, spec.height
    S = W * H
    P = np.zeros((S, 4, S))
    R = np.zeros((S, 4, S))
    goal = spec.index(*spec.goal)
    for y in range(H):
        for x in range(W):
            s = spec.index(x, y)
            if s == goal:
                P[s, :, s] = 1.0
                continue
            for a, (dx, dy) in GRID_MOVES.items():
                nx, ny = x + dx, y + dy
                s2 = spec.index(nx, ny) if (0 <= nx < W and 0 <= ny < H) else s
                P[s, a, s2] = 1.0
                R[s, a, s2] = spec.step_reward + (spec.goal_reward if s2 == goal else 0.0)
    mu0 = np.zeros(S)
    mu0[spec.index(*spec.start)] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[goal] = True
    names = tuple(f"({x},{y})" for y in range(H) for x in range(W))
    mdp = TabularMdp(P, R, mu0, terminal, spec.episode_cap, action_names=("U", "D", "L", "R"), state_names=names)
    target = PartialPolicy.from_actions(S, 4, {spec.index(*c): a for c, a in spec.target_arrows})
    return mdp, target


def goal_reachable(mdp: TabularMdp, source: int, goal: int) -> bool:
    """Breadth-first search over positive-probability transitions."""
    seen = {source}
    queue = deque([source])
    while queue:
        s = queue.popleft()
        if s == goal:
            return True
        if mdp.terminal[s]:
            continue
        for s2 in np.flatnonzero(mdp.transition[s].sum(axis=0) > 0):
            if s2 not in seen:
                seen.add(int(s2))
                queue.append(int(s2))
    return False


def parse_grid_spec(text: str) -> GridSpec:
    """Parse ``grid W H`` / ``start x y`` / ``goal x y`` / ``arrow x y D`` lines.

    Optional lines: ``step_reward v``, ``goal_reward v``, ``cap H``.
    """
    fields: dict = {"target_arrows": []}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            key = tok[0]
            if key == "grid":
                fields["width"], fields["height"] = int(tok[1]), int(tok[2])
            elif key in ("start", "goal"):
                fields[key] = (int(tok[1]), int(tok[2]))
            elif key == "arrow":
                code = tok[3].upper()
                if code not in GRID_ACTION_CODES:
                    raise ValueError(f"arrow direction must be one of UDLR, got {tok[3]!r}")
                fields["target_arrows"].append(((int(tok[1]), int(tok[2])), GRID_ACTION_CODES[code]))
            elif key in ("step_reward", "goal_reward"):
                fields[key] = float(tok[1])
            elif key == "cap":
                fields["episode_cap"] = int(tok[1])
            else:
                raise ValueError(f"unknown directive {key!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    for key in ("width", "start", "goal"):
        if key not in fields:
            raise ValueError(f"grid spec is missing '{key}'")
    spec = GridSpec(**fields)
    spec.validate()
    return spec


def load_grid_spec(path: str | Path) -> GridSpec:
    return parse_grid_spec(Path(path).read_text())


def shipped_grid_spec(name: str) -> GridSpec:
    """Bundled 10x10 specs: ``grid10_target1`` or ``grid10_target2``."""
    text = resources.files("poisonlab.data").joinpath(f"{name}.txt").read_text()
    return parse_grid_spec(text)


def make_env(env_id: str) -> tuple[TabularMdp, PartialPolicy]:
    """Resolve ``chain:N``, ``grid:<shipped name or path>`` or an MDP file.

    An MDP file may carry its target in a sibling ``<file>.target`` file of
    ``target s a1 a2 ...`` lines; otherwise every state is don't-care.
    """
    if env_id.startswith("chain:"):
        return build_chain(int(env_id.split(":", 1)[1]))
    if env_id.startswith("grid:"):
        ref = env_id.split(":", 1)[1]
        spec = load_grid_spec(ref) if Path(ref).exists() else shipped_grid_spec(ref)
        return build_gridworld(spec)
    from .mdp import load_mdp

    mdp = load_mdp(env_id)
    target_file = Path(env_id + ".target")
    actions: dict[int, set[int]] = {}
    if target_file.exists():
        for raw in target_file.read_text().splitlines():
            tok = raw.split("#", 1)[0].split()
            if tok and tok[0] == "target":
                actions[int(tok[1])] = {int(a) for a in tok[2:]}
    return mdp, PartialPolicy.from_actions(mdp.n_states, mdp.n_actions, actions)
