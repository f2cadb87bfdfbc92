"""Seeded attacked-learning trials, Monte Carlo cost estimates and sweeps."""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .attacks import AttackPolicy, AttackState, achieved_count, clip, in_target_set, surrogate_loss
from .envs import PartialPolicy
from .mdp import TabularMdp
from .qlearner import LearnerParams, Victim, draw_noise, transition_cdfs


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for trial ``index``.

    Uses SeedSequence(master_seed, spawn_key=(index,)), so trial i gets the
    same stream whatever the total trial count.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


def rle_encode(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.size == 0:
        return np.zeros(0, dtype=x.dtype), np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(np.diff(x)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [x.size])))
    return x[starts].copy(), lengths.astype(np.int64)


def rle_decode(values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    return np.repeat(values, lengths)


@dataclass
class TrialRecord:
    """One attacked learning run.

    ``cost01`` and ``achieved`` are kept run-length encoded; the per-step
    ``delta`` and ``rho`` arrays are only kept when asked for.
    """

    seed_index: int
    master_seed: int
    T: int
    J: int
    sum_rho: float
    max_abs_delta: float
    n_clipped: int
    last_cost_step: int
    final_q: np.ndarray
    final_in_target: bool
    cost_rle: tuple[np.ndarray, np.ndarray]
    achieved_rle: tuple[np.ndarray, np.ndarray]
    delta: np.ndarray | None = None
    rho: np.ndarray | None = None

    @property
    def cost01(self) -> np.ndarray:
        return rle_decode(*self.cost_rle)

    @property
    def achieved(self) -> np.ndarray:
        return rle_decode(*self.achieved_rle)


@dataclass
class TrialConfig:
    mdp: TabularMdp
    target: PartialPolicy
    params: LearnerParams
    attack: AttackPolicy
    T: int
    eta: float = 0.1
    label: str = ""
    delta: float = math.nan

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.target.admitted.shape != (self.mdp.n_states, self.mdp.n_actions):
            raise ValueError("target policy does not match the MDP")


def _kernel_arrays(cfg: TrialConfig):
    spec = cfg.attack.kernel_spec()
    if spec is None:
        return None
    mdp = cfg.mdp
    n_states = mdp.n_states
    targets = cfg.target.target_states.astype(np.int64)
    tpos = np.full(n_states, -1, dtype=np.int64)
    tpos[targets] = np.arange(targets.size)
    p_cdf, mu0_cdf = transition_cdfs(mdp)
    return dict(
        p_cdf=np.ascontiguousarray(p_cdf),
        reward=np.ascontiguousarray(mdp.reward),
        terminal=np.ascontiguousarray(mdp.terminal),
        mu0_cdf=mu0_cdf,
        admitted=np.ascontiguousarray(cfg.target.admitted),
        tpos=tpos,
        targets=targets,
        kind=spec["kind"],
        table_sa=np.ascontiguousarray(spec.get("table", K._EMPTY_F2), dtype=float),
        table_sas=np.ascontiguousarray(spec.get("table_sas", K._EMPTY_F3), dtype=float),
        order=np.ascontiguousarray(spec.get("order", K._EMPTY_I1), dtype=np.int64),
        nu=np.ascontiguousarray(spec.get("nu", K._EMPTY_B3), dtype=np.bool_),
        faa_eta=float(spec.get("eta", 0.0)),
        theta=np.ascontiguousarray(spec.get("theta", K._EMPTY_F2), dtype=float),
        lin_base=bool(spec.get("base", False)),
    )


def _run_fast(cfg: TrialConfig, arrays, q, u0, noise, full):
    T = cfg.T
    cost = np.zeros(T, dtype=np.int8)
    ach = np.zeros(T, dtype=np.int32)
    rho = np.zeros(T if full else 0)
    delta = np.zeros(T if full else 0)
    p = cfg.params
    res = K.run_kernel(
        arrays["p_cdf"], arrays["reward"], arrays["terminal"], arrays["mu0_cdf"], cfg.mdp.episode_cap,
        float(p.epsilon), float(p.gamma), p.lr.code, float(p.lr.value),
        q, float(u0), noise,
        arrays["admitted"], arrays["tpos"], arrays["targets"], float(cfg.eta),
        arrays["kind"], float(cfg.attack.delta_max), arrays["table_sa"], arrays["table_sas"],
        arrays["order"], arrays["nu"], arrays["faa_eta"], arrays["theta"], arrays["lin_base"],
        cost, ach, rho, delta, full,
    )
    return res, cost, ach, (delta if full else None), (rho if full else None)


def _run_python(cfg: TrialConfig, q_unused, u0, noise, full):
    victim = Victim(cfg.mdp, cfg.params, u0, noise)
    attack = cfg.attack.spawn()
    T = cfg.T
    cost = np.zeros(T, dtype=np.int8)
    ach = np.zeros(T, dtype=np.int32)
    rho = np.zeros(T)
    delta_log = np.zeros(T)
    J = 0
    max_abs = 0.0
    n_clip = 0
    last_cost = -1
    for t in range(T):
        q = victim.state.q
        c = 0 if in_target_set(q, cfg.target) else 1
        cost[t] = c
        J += c
        if c:
            last_cost = t
        ach[t] = achieved_count(q, cfg.target)
        rho[t] = surrogate_loss(q, cfg.target, cfg.eta)
        tr = victim.observe()
        view = q.view()
        view.flags.writeable = False
        ls = victim.state
        xi = AttackState(tr.s, tr.a, tr.s_next, tr.r, tr.eoe, view, ls.t, ls.alpha(cfg.params.lr, tr.s, tr.a))
        raw = attack.raw(xi)
        d = clip(raw, attack.delta_max)
        if d != raw:
            n_clip += 1
        max_abs = max(max_abs, abs(d))
        delta_log[t] = d
        victim.learn(d)
    res = (J, float(rho.sum()), max_abs, n_clip, last_cost)
    return res, cost, ach, (delta_log if full else None), (rho if full else None), victim.state.q


def run_trial(
    cfg: TrialConfig,
    seed_index: int = 0,
    master_seed: int = 0,
    full: bool = False,
    fast: bool = True,
    _arrays=None,
) -> TrialRecord:
    """One attacked learning run of ``cfg.T`` steps.

    cost01_t is evaluated on Q_t before step t's update, for t = 0..T-1.
    """
    rng = trial_rng(master_seed, seed_index)
    u0, noise = draw_noise(rng, cfg.T)
    arrays = _arrays if _arrays is not None else (_kernel_arrays(cfg) if fast else None)
    if arrays is not None:
        q = cfg.params.initial_q(cfg.mdp)
        res, cost, ach, delta, rho = _run_fast(cfg, arrays, q, u0, noise, full)
    else:
        res, cost, ach, delta, rho, q = _run_python(cfg, None, u0, noise, full)
    J, sum_rho, max_abs, n_clip, last_cost = res
    return TrialRecord(
        seed_index=seed_index,
        master_seed=master_seed,
        T=cfg.T,
        J=int(J),
        sum_rho=float(sum_rho),
        max_abs_delta=float(max_abs),
        n_clipped=int(n_clip),
        last_cost_step=int(last_cost),
        final_q=q,
        final_in_target=in_target_set(q, cfg.target),
        cost_rle=rle_encode(cost),
        achieved_rle=rle_encode(ach),
        delta=delta,
        rho=rho,
    )


def run_trials(
    cfg: TrialConfig,
    trials: int,
    master_seed: int = 0,
    threads: int = 1,
    first_index: int = 0,
    fast: bool = True,
) -> list[TrialRecord]:
    """Independent trials, returned in trial-index order."""
    arrays = _kernel_arrays(cfg) if fast else None
    indices = range(first_index, first_index + trials)

    def one(i):
        return run_trial(cfg, i, master_seed, fast=fast, _arrays=arrays)

    if threads <= 1 or trials <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, indices))


@dataclass
class AggregateStats:
    label: str
    delta: float
    trials: int
    T: int
    mean_J: float
    stderr_J: float
    mean_sum_rho: float
    curves: dict[str, np.ndarray] | None = field(default=None, repr=False)


def _mean_stderr(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def aggregate(records: list[TrialRecord], label: str = "", delta: float = math.nan, curves: bool = False) -> AggregateStats:
    """Ordered reduction over trial records."""
    if not records:
        raise ValueError("no trials to aggregate")
    mean_J, se_J = _mean_stderr(np.array([r.J for r in records]))
    mean_rho = float(np.mean([r.sum_rho for r in records]))
    out = AggregateStats(label, delta, len(records), records[0].T, mean_J, se_J, mean_rho)
    if curves:
        T = records[0].T
        n = len(records)
        s_c = np.zeros(T)
        ss_c = np.zeros(T)
        s_a = np.zeros(T)
        ss_a = np.zeros(T)
        for r in records:
            c = r.cost01.astype(float)
            a = r.achieved.astype(float)
            s_c += c
            ss_c += c * c
            s_a += a
            ss_a += a * a

        def se(s, ss):
            if n < 2:
                return np.zeros_like(s)
            var = np.maximum(ss - s * s / n, 0.0) / (n - 1)
            return np.sqrt(var / n)

        out.curves = dict(
            mean_cost01=s_c / n,
            stderr_cost01=se(s_c, ss_c),
            mean_achieved=s_a / n,
            stderr_achieved=se(s_a, ss_a),
        )
    return out


def evaluate(cfg: TrialConfig, trials: int, master_seed: int = 0, threads: int = 1, curves: bool = False) -> AggregateStats:
    """Monte Carlo estimate of J_T over ``trials`` seeded runs."""
    records = run_trials(cfg, trials, master_seed, threads=threads)
    return aggregate(records, cfg.label, cfg.delta, curves=curves)


def sweep(cells: list[TrialConfig], trials: int, master_seed: int = 0, threads: int = 1) -> list[AggregateStats]:
    """Evaluate every cell with the same master seed (common random numbers)."""
    if not cells:
        raise ValueError("sweep needs at least one cell")
    return [evaluate(cfg, trials, master_seed, threads) for cfg in cells]


# --- CSV ------------------------------------------------------------------

EVALUATE_HEADER = "label,delta,trials,T,mean_J,stderr_J"
CURVES_HEADER = "t,mean_cost01,stderr,mean_achieved,stderr"
TRIAL_HEADER = "t,delta,cost01,rho,achieved"


def _num(x: float) -> str:
    return repr(float(x))


def stats_csv(rows: list[AggregateStats], header: bool = True) -> str:
    buf = io.StringIO()
    if header:
        buf.write(EVALUATE_HEADER + "\n")
    for st in rows:
        buf.write(f"{st.label},{_num(st.delta)},{st.trials},{st.T},{_num(st.mean_J)},{_num(st.stderr_J)}\n")
    return buf.getvalue()


def curves_csv(stats: AggregateStats) -> str:
    if stats.curves is None:
        raise ValueError("stats were aggregated without curves")
    c = stats.curves
    buf = io.StringIO()
    buf.write(CURVES_HEADER + "\n")
    for t in range(stats.T):
        buf.write(
            f"{t},{_num(c['mean_cost01'][t])},{_num(c['stderr_cost01'][t])},"
            f"{_num(c['mean_achieved'][t])},{_num(c['stderr_achieved'][t])}\n"
        )
    return buf.getvalue()


def trial_csv(rec: TrialRecord) -> str:
    if rec.delta is None or rec.rho is None:
        raise ValueError("trial was run without full per-step logs")
    cost = rec.cost01
    ach = rec.achieved
    buf = io.StringIO()
    buf.write(TRIAL_HEADER + "\n")
    for t in range(rec.T):
        buf.write(f"{t},{_num(rec.delta[t])},{int(cost[t])},{_num(rec.rho[t])},{int(ach[t])}\n")
    return buf.getvalue()


def with_attack(cfg: TrialConfig, attack: AttackPolicy, **changes) -> TrialConfig:
    return replace(cfg, attack=attack, **changes)
