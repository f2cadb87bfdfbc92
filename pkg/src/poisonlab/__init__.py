"""Simulation and certification lab for reward-poisoning attacks on tabular Q-learning."""

from .attacks import (
    AttackPolicy,
    AttackState,
    FastAdaptiveAttack,
    TableAttack,
    build_faa,
    build_nonadaptive_attack,
    greedy_attack,
    null_attack,
    surrogate_loss,
)
from .certificates import (
    Certificates,
    certify,
    chain_covering_time,
    epsilon_diameter,
    epsilon_distance,
    estimate_delta4,
)
from .envs import GridSpec, PartialPolicy, build_chain, build_gridworld, make_env
from .harness import AggregateStats, TrialConfig, TrialRecord, evaluate, run_trial, run_trials, sweep
from .mdp import TabularMdp, load_mdp, value_iteration
from .qlearner import PAPER_LEARNER, LearnerParams, LearningRate, Victim
from .search import AttackEnv, ParamAttackPolicy, search

__version__ = "0.1.0"
