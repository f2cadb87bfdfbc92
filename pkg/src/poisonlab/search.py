"""The attack MDP and a population-based search over attack policies.

The attacker is itself a controller: it observes the victim's transition
and Q-table, emits a bounded poison, and pays the surrogate loss of the
victim's Q-table every step. Policies are searched with an elitist
Gaussian population method (sample perturbations, keep the elites, refit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .attacks import AttackPolicy, AttackState, FastAdaptiveAttack, build_faa, clip, surrogate_loss
from .envs import PartialPolicy
from .harness import TrialConfig, _kernel_arrays, run_trial, trial_rng
from .mdp import TabularMdp
from .qlearner import LearnerParams, Victim, draw_noise

NONADAPTIVE = "nonadaptive-table"
ADAPTIVE = "adaptive-linear"
MODES = (NONADAPTIVE, ADAPTIVE)
FEATURE_MAP_ID = "onehot-state*[bias,margin,admitted,centered-q]"
FILE_MAGIC = "poisonlab-attack-policy"
FILE_VERSION = 1


@dataclass
class AttackEnv:
    """Attack MDP: state xi_t, action delta_t in [-Δ, Δ], loss rho, horizon T.

    One step is one victim step, in the order: episode reset (if the last
    step ended one), victim action, environment transition and clean reward,
    attacker poison, victim update.
    """

    mdp: TabularMdp
    params: LearnerParams
    target: PartialPolicy
    delta_max: float
    horizon: int
    eta: float = 0.1
    victim: Victim | None = field(default=None, repr=False)
    n_clamped: int = 0
    t: int = 0

    def reset(self, seed_index: int = 0, master_seed: int = 0) -> tuple[AttackState, float]:
        """Start a run; returns xi_0 and rho(xi_0)."""
        u0, noise = draw_noise(trial_rng(master_seed, seed_index), self.horizon)
        self.victim = Victim(self.mdp, self.params, u0, noise)
        self.n_clamped = 0
        self.t = 0
        return self._observe(), self.loss()

    def _observe(self) -> AttackState:
        tr = self.victim.observe()
        view = self.victim.state.q.view()
        view.flags.writeable = False
        ls = self.victim.state
        return AttackState(tr.s, tr.a, tr.s_next, tr.r, tr.eoe, view, ls.t, ls.alpha(self.params.lr, tr.s, tr.a))

    def loss(self) -> float:
        return surrogate_loss(self.victim.state.q, self.target, self.eta)

    @property
    def done(self) -> bool:
        return self.victim is not None and self.t >= self.horizon

    def step(self, delta: float) -> tuple[AttackState | None, float]:
        """Apply the poison to the pending transition; returns (xi_{t+1}, rho(xi_{t+1})).

        The next state is None once the horizon is reached.
        """
        if self.victim is None:
            raise RuntimeError("call reset() first")
        if self.done:
            raise RuntimeError("attack episode is over")
        if abs(delta) > self.delta_max:
            self.n_clamped += 1
            delta = clip(delta, self.delta_max)
        self.victim.learn(delta)
        self.t += 1
        loss = self.loss()
        if self.done:
            return None, loss
        return self._observe(), loss

    def trial_config(self, policy: AttackPolicy) -> TrialConfig:
        return TrialConfig(self.mdp, self.target, self.params, policy, self.horizon, eta=self.eta)


def state_features(xi: AttackState, target: PartialPolicy) -> np.ndarray:
    """[bias, target margin at s, a admitted at s, Q(s, .) minus its mean]."""
    row = xi.q[xi.s]
    n = row.shape[0]
    mean = 0.0
    for b in range(n):
        mean += float(row[b])
    mean /= n
    adm = target.admitted[xi.s]
    margin = 0.0
    if not adm.all():
        inside = max(float(row[b]) for b in range(n) if adm[b])
        outside = max(float(row[b]) for b in range(n) if not adm[b])
        margin = -(outside - inside)
    feats = [1.0, margin, 1.0 if adm[xi.a] else 0.0]
    feats.extend(float(row[b]) - mean for b in range(n))
    return np.array(feats)


class ParamAttackPolicy(AttackPolicy):
    """Parametric attack squashed into [-Δ, Δ] with tanh.

    ``nonadaptive-table``: delta = Δ tanh(theta[s, a, s']).
    ``adaptive-linear``: delta = Δ tanh(theta[s] . features(xi)), added to
    an optional base attack (FAA) and clipped; theta = 0 reproduces the base.
    """

    def __init__(self, mode: str, theta: np.ndarray, delta_max: float, target: PartialPolicy,
                 base: FastAdaptiveAttack | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        n_states, n_actions = target.admitted.shape
        shape = (n_states, n_actions, n_states) if mode == NONADAPTIVE else (n_states, 3 + n_actions)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != shape:
            raise ValueError(f"theta must have shape {shape}, got {theta.shape}")
        if base is not None and mode != ADAPTIVE:
            raise ValueError("a base attack only combines with adaptive-linear mode")
        self.mode = mode
        self.theta = theta
        self.delta_max = float(delta_max)
        self.target = target
        self.base = base
        self.name = f"search:{mode}" + ("+faa" if base is not None else "")

    @classmethod
    def zeros(cls, mode, mdp, target, delta_max, base=None):
        n_s, n_a = mdp.n_states, mdp.n_actions
        shape = (n_s, n_a, n_s) if mode == NONADAPTIVE else (n_s, 3 + n_a)
        return cls(mode, np.zeros(shape), delta_max, target, base)

    def with_theta(self, theta) -> ParamAttackPolicy:
        return ParamAttackPolicy(self.mode, theta, self.delta_max, self.target, self.base)

    def raw(self, xi):
        if self.mode == NONADAPTIVE:
            return self.delta_max * math.tanh(self.theta[xi.s, xi.a, xi.s_next])
        raw = 0.0
        if self.base is not None:
            raw = clip(self.base.raw(xi), self.delta_max)
        f = state_features(xi, self.target)
        th = self.theta[xi.s]
        z = th[0] + th[1] * f[1]
        if f[2]:
            z += th[2]
        for b in range(3, f.shape[0]):
            z += th[b] * f[b]
        return raw + self.delta_max * math.tanh(z)

    def kernel_spec(self):
        if self.mode == NONADAPTIVE:
            return dict(kind=K.ATTACK_TABLE_SAS, table_sas=self.theta)
        spec = dict(kind=K.ATTACK_LINEAR, theta=self.theta, base=self.base is not None)
        if self.base is not None:
            spec.update(order=self.base.order, nu=self.base.nu, eta=self.base.eta)
        return spec


def rollout_objective(policy: AttackPolicy, env: AttackEnv, seeds, master_seed: int = 0) -> float:
    """Mean over seeds of sum_{t<T} rho(xi_t)."""
    cfg = env.trial_config(policy)
    arrays = _kernel_arrays(cfg)
    totals = [run_trial(cfg, int(i), master_seed, _arrays=arrays).sum_rho for i in seeds]
    return float(np.mean(totals))


@dataclass
class SearchResult:
    policy: ParamAttackPolicy
    objective: float
    history: list[float]


def search(
    env: AttackEnv,
    mode: str,
    init: ParamAttackPolicy | None = None,
    budget: int = 20,
    rng: np.random.Generator | None = None,
    seeds=range(16),
    master_seed: int = 0,
    population: int = 32,
    elite_frac: float = 0.25,
    sigma: float = 0.5,
    decay: float = 0.95,
) -> SearchResult:
    """Elitist Gaussian population search minimising the rollout objective.

    ``budget`` is the number of generations. The incumbent best is
    re-entered in every generation, so the best-so-far objective never
    increases. Supplying ``init`` centres the first population on it.
    """
    if budget < 1:
        raise ValueError("budget must be at least one generation")
    if rng is None:
        rng = np.random.default_rng(0)
    if init is None:
        init = ParamAttackPolicy.zeros(mode, env.mdp, env.target, env.delta_max)
    elif init.mode != mode:
        raise ValueError("init policy mode does not match")
    seeds = list(seeds)
    best = init
    best_obj = rollout_objective(init, env, seeds, master_seed)
    mean = init.theta.copy()
    n_elite = max(1, int(round(population * elite_frac)))
    history = []
    for _ in range(budget):
        cands = [best.theta]
        cands += [mean + sigma * rng.standard_normal(mean.shape) for _ in range(population - 1)]
        scores = [rollout_objective(best.with_theta(th), env, seeds, master_seed) for th in cands]
        ranked = np.argsort(scores, kind="stable")
        if scores[ranked[0]] < best_obj:
            best_obj = float(scores[ranked[0]])
            best = best.with_theta(cands[ranked[0]])
        mean = np.mean([cands[i] for i in ranked[:n_elite]], axis=0)
        sigma *= decay
        history.append(best_obj)
    return SearchResult(best, best_obj, history)


# --- serialization --------------------------------------------------------


def format_policy(policy: ParamAttackPolicy) -> str:
    lines = [
        f"{FILE_MAGIC} v{FILE_VERSION}",
        f"mode {policy.mode}",
        f"delta {policy.delta_max!r}",
        f"features {FEATURE_MAP_ID}",
        f"base {'faa' if policy.base is not None else 'none'}",
    ]
    if policy.base is not None:
        lines.append(f"eta {policy.base.eta!r}")
    lines.append("shape " + " ".join(str(d) for d in policy.theta.shape))
    lines.append("theta " + " ".join(repr(float(x)) for x in policy.theta.ravel()))
    return "\n".join(lines) + "\n"


def parse_policy(text: str, mdp: TabularMdp, target: PartialPolicy, params: LearnerParams) -> ParamAttackPolicy:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith(FILE_MAGIC):
        raise ValueError("not an attack-policy file")
    version = lines[0].split()[1]
    if version != f"v{FILE_VERSION}":
        raise ValueError(f"unsupported policy file version {version}")
    kv = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        kv[key] = rest.strip()
    if kv.get("features", FEATURE_MAP_ID) != FEATURE_MAP_ID:
        raise ValueError(f"unknown feature map {kv['features']!r}")
    shape = tuple(int(x) for x in kv["shape"].split())
    theta = np.array([float(x) for x in kv["theta"].split()]).reshape(shape)
    delta = float(kv["delta"])
    base = None
    if kv.get("base", "none") == "faa":
        base = build_faa(mdp, params, target, delta, float(kv.get("eta", 0.1)))
    return ParamAttackPolicy(kv["mode"], theta, delta, target, base)


def save_policy(policy: ParamAttackPolicy, path: str | Path) -> None:
    Path(path).write_text(format_policy(policy))


def load_policy(path: str | Path, mdp, target, params) -> ParamAttackPolicy:
    return parse_policy(Path(path).read_text(), mdp, target, params)
