"""Command-line entry point: ``poisonlab <command> [options]``.

Every command reads an optional key=value config file; command-line flags
override it. Config errors exit with status 2.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import certificates as cert
from .attacks import AttackPolicy, build_faa, build_nonadaptive_attack, null_attack
from .envs import make_env
from .harness import (
    TrialConfig,
    curves_csv,
    evaluate,
    run_trial,
    stats_csv,
    sweep,
    trial_csv,
)
from .mdp import value_iteration
from .qlearner import LearnerParams, LearningRate
from .search import MODES, NONADAPTIVE, AttackEnv, ParamAttackPolicy, load_policy, save_policy, search

EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: str = "chain:4"
    gamma: float = 0.9
    epsilon: float = 0.1
    lr: str = "constant(0.9)"
    q0: float = 0.0
    attack: str = "faa"
    delta: float = 1.0
    eta: float = 0.1
    T: int = 100_000
    trials: int = 100
    master_seed: int = 0
    threads: int = 1
    label: str = ""
    # sweep axes: comma-separated lists
    deltas: list = field(default_factory=list)
    chains: list = field(default_factory=list)
    # search
    mode: str = "adaptive-linear"
    budget: int = 20
    population: int = 32
    train_seeds: int = 16
    warm_start: bool = True

    def learner(self) -> LearnerParams:
        return LearnerParams(epsilon=self.epsilon, gamma=self.gamma, lr=LearningRate.parse(self.lr), q0=self.q0)


_INT_KEYS = {"T", "trials", "master_seed", "threads", "budget", "population", "train_seeds"}
_FLOAT_KEYS = {"gamma", "epsilon", "q0", "delta", "eta"}
_BOOL_KEYS = {"warm_start"}


def _coerce(key: str, value: str):
    if key in _INT_KEYS:
        return int(float(value)) if "e" in value.lower() else int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if key == "deltas":
        return [float(x) for x in value.split(",") if x.strip()]
    if key == "chains":
        return [int(x) for x in value.split(",") if x.strip()]
    return value


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """key = value lines; '#' starts a comment."""
    cfg = base or RunConfig()
    known = set(RunConfig.__dataclass_fields__)
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _coerce(key, value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    return replace(cfg, **changes)


def build_attack(spec: str, mdp, target, params: LearnerParams, delta: float, eta: float) -> AttackPolicy:
    if spec == "none":
        return null_attack()
    if spec == "nonadaptive":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return build_nonadaptive_attack(mdp, params.gamma, target, delta, value_iteration(mdp, params.gamma))
    if spec == "faa":
        return build_faa(mdp, params, target, delta, eta)
    if spec.startswith("search:"):
        return load_policy(spec[len("search:"):], mdp, target, params)
    raise ConfigError(f"unknown attack {spec!r}; use none, nonadaptive, faa or search:<file>")


def trial_config(cfg: RunConfig, env: str | None = None, delta: float | None = None) -> TrialConfig:
    env = env or cfg.env
    delta = cfg.delta if delta is None else delta
    mdp, target = make_env(env)
    params = cfg.learner()
    attack = build_attack(cfg.attack, mdp, target, params, delta, cfg.eta)
    label = cfg.label or f"{cfg.attack}@{env}"
    return TrialConfig(mdp, target, params, attack, cfg.T, eta=cfg.eta, label=label, delta=attack.delta_max)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --- commands -------------------------------------------------------------


def cmd_certify(cfg: RunConfig, args) -> int:
    mdp, target = make_env(cfg.env)
    qstar = value_iteration(mdp, cfg.gamma)
    c = cert.certify(mdp, cfg.gamma, target, qstar)
    lines = [
        f"delta1 {c.delta1!r}",
        f"delta2 {c.delta2!r}",
        f"delta3 {c.delta3!r}",
        f"verdict({cfg.delta!r}) {c.verdict(cfg.delta)}",
    ]
    if args.delta4:
        d4 = cert.estimate_delta4(mdp, target, cfg.learner(), trials=cfg.trials, horizon=cfg.T,
                                  master_seed=cfg.master_seed, eta=cfg.eta, threads=cfg.threads)
        lines.append(f"delta4 {d4!r}")
    _write("\n".join(lines) + "\n", args.out)
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    tc = trial_config(cfg)
    rec = run_trial(tc, args.trial, cfg.master_seed, full=True)
    _write(trial_csv(rec), args.out)
    print(f"J={rec.J} final_in_target={rec.final_in_target}", file=sys.stderr)
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    tc = trial_config(cfg)
    stats = evaluate(tc, cfg.trials, cfg.master_seed, cfg.threads, curves=bool(args.curves))
    _write(stats_csv([stats]), args.out)
    if args.curves:
        Path(args.curves).write_text(curves_csv(stats))
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    if bool(cfg.deltas) == bool(cfg.chains):
        raise ConfigError("sweep needs exactly one non-empty axis: deltas or chains")
    if cfg.deltas:
        cells = [replace(trial_config(cfg, delta=d), label=f"{cfg.attack}@{cfg.env}") for d in cfg.deltas]
    else:
        cells = [replace(trial_config(cfg, env=f"chain:{n}"), label=f"{cfg.attack}@chain:{n}") for n in cfg.chains]
    _write(stats_csv(sweep(cells, cfg.trials, cfg.master_seed, cfg.threads)), args.out)
    return 0


def cmd_search(cfg: RunConfig, args) -> int:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if not args.policy_out:
        raise ConfigError("search needs --policy-out")
    mdp, target = make_env(cfg.env)
    params = cfg.learner()
    env = AttackEnv(mdp, params, target, cfg.delta, cfg.T, eta=cfg.eta)
    base = None
    if cfg.mode != NONADAPTIVE and cfg.warm_start:
        base = build_faa(mdp, params, target, cfg.delta, cfg.eta)
    init = ParamAttackPolicy.zeros(cfg.mode, mdp, target, cfg.delta, base=base)
    res = search(env, cfg.mode, init=init, budget=cfg.budget, rng=np.random.default_rng(cfg.master_seed),
                 seeds=range(cfg.train_seeds), master_seed=cfg.master_seed, population=cfg.population)
    save_policy(res.policy, args.policy_out)
    for gen, obj in enumerate(res.history):
        print(f"{gen},{obj!r}")
    return 0


def cmd_covering_time(cfg: RunConfig, args) -> int:
    rows = ["n,epsilon,covering_time,linear_solve"]
    for n in args.n:
        rows.append(f"{n},{cfg.epsilon!r},{cert.chain_covering_time(n, cfg.epsilon)!r},"
                    f"{cert.chain_covering_time_linear(n, cfg.epsilon)!r}")
    _write("\n".join(rows) + "\n", args.out)
    return 0


COMMANDS = {
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "search": cmd_search,
    "covering-time": cmd_covering_time,
}

_OVERRIDES = [
    ("--env", str), ("--gamma", float), ("--epsilon", float), ("--lr", str), ("--attack", str),
    ("--delta", float), ("--eta", float), ("--T", int), ("--trials", int), ("--master-seed", int),
    ("--threads", int), ("--label", str), ("--mode", str), ("--budget", int), ("--population", int),
    ("--train-seeds", int),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonlab", description="Reward-poisoning lab for tabular Q-learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output file (default stdout)")
        for flag, typ in _OVERRIDES:
            p.add_argument(flag, type=typ, default=None)
        if name == "certify":
            p.add_argument("--delta4", action="store_true", help="also estimate delta4 by simulation")
        if name == "simulate":
            p.add_argument("--trial", type=int, default=0, help="trial index under the master seed")
        if name == "evaluate":
            p.add_argument("--curves", help="write per-step curves CSV here")
        if name == "sweep":
            p.add_argument("--deltas", help="comma-separated delta axis")
            p.add_argument("--chains", help="comma-separated chain-length axis")
        if name == "search":
            p.add_argument("--policy-out", help="where to write the found policy")
        if name == "covering-time":
            p.add_argument("--n", type=int, nargs="+", default=[2, 3, 4, 5])
    return parser


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        cfg = parse_config(text, cfg)
    changes = {}
    for flag, _ in _OVERRIDES:
        key = flag[2:].replace("-", "_")
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    for key in ("deltas", "chains"):
        val = getattr(args, key, None)
        if val is not None:
            try:
                changes[key] = _coerce(key, val)
            except ValueError as e:
                raise ConfigError(f"bad --{key}: {e}") from None
    return replace(cfg, **changes)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"poisonlab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
