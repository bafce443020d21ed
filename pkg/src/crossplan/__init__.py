"""Contingency-policy training and Monte-Carlo policy selection for a
partially observable intersection-crossing task."""

from .contingency import (
    EpisodeTrace,
    FeatureHistogram,
    PenaltyConfig,
    build_density,
    feature,
    penalty,
    sample_initial_state,
    speed_bin_edges,
    train_concurrent,
    trajectory_metric,
)
from .hiplanner import (
    PlannerConfig,
    belief_update,
    estimate_failure,
    initial_belief,
    rollout,
    run_episode,
    run_greedy_episode,
    sample_params,
    select_policy,
)
from .qlearn import (
    DoubleQLearner,
    QNetwork,
    TrainConfig,
    act,
    greedy_policy,
    load_checkpoint,
    q_values,
    save_checkpoint,
    td_loss,
)
from .replay_memory import HandoffPoolEmpty, ReplayBuffer, Transition
from .traffic_env import (
    ACTIONS,
    EnvConfig,
    EnvParams,
    EnvState,
    IntersectionEnv,
    Observation,
    StepOutcome,
    VehicleState,
)

__all__ = [
    "ACTIONS",
    "DoubleQLearner",
    "EnvConfig",
    "EnvParams",
    "EnvState",
    "EpisodeTrace",
    "FeatureHistogram",
    "HandoffPoolEmpty",
    "IntersectionEnv",
    "Observation",
    "PenaltyConfig",
    "PlannerConfig",
    "QNetwork",
    "ReplayBuffer",
    "StepOutcome",
    "TrainConfig",
    "Transition",
    "VehicleState",
    "act",
    "belief_update",
    "build_density",
    "estimate_failure",
    "feature",
    "greedy_policy",
    "initial_belief",
    "load_checkpoint",
    "penalty",
    "q_values",
    "rollout",
    "run_episode",
    "run_greedy_episode",
    "sample_initial_state",
    "sample_params",
    "save_checkpoint",
    "select_policy",
    "speed_bin_edges",
    "td_loss",
    "train_concurrent",
    "trajectory_metric",
]
