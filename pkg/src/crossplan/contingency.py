"""Concurrent training of an optimal and a deliberately distinct policy.

The contingency agent shares the task and reward of the optimal agent but
is pushed toward different observation-space trajectories by two levers:

* a terminal-step penalty, inversely proportional to the L1 distance
  between the episode's ego-speed density and a reference density built
  from the optimal agent's recent replay observations, and
* a mixed initial-state distribution that seeds a fraction of its episodes
  from pre-intersection states sampled out of the optimal agent's buffer.

Both agents train with double Q-learning, alternating one episode each;
the contingency agent's gradient updates start only once the optimal
agent's replay buffer is full.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .qlearn import DoubleQLearner, QNetwork, TrainConfig, act, default_obs_scale
from .replay_memory import HandoffPoolEmpty, ReplayBuffer, Transition
from .traffic_env import EnvParams, EnvState, IntersectionEnv, Observation

# 0.5 m/s bins over [0, v_max]: fine enough to separate fast-crossing from
# yielding speed profiles.
SPEED_BINS = 30

PI_STAR = "pi_star"
PI_ONE = "pi1"


@dataclass(frozen=True)
class PenaltyConfig:
    """Weights of the trajectory penalty and the handoff-init mixture.

    alpha = 0 disables the penalty (the contingency loop then degenerates
    to the plain training loop); delta offsets the denominator so the
    penalty stays finite at zero distance.
    """

    alpha: float = 3.0
    delta: float = 0.1
    beta: float = 0.5
    k_ref: int = 100

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if not (0 <= self.beta <= 1):
            raise ValueError("beta must lie in [0, 1]")
        if self.k_ref < 1:
            raise ValueError("k_ref must be >= 1")


@dataclass(frozen=True)
class FeatureHistogram:
    """Normalized histogram of an observation feature over fixed bins."""

    edges: np.ndarray
    masses: np.ndarray
    count: int

    def __post_init__(self) -> None:
        if len(self.edges) != len(self.masses) + 1:
            raise ValueError("edges must be one longer than masses")
        if np.any(self.masses < 0) or abs(float(self.masses.sum()) - 1.0) > 1e-9:
            raise ValueError("masses must be non-negative and sum to 1")


@dataclass(frozen=True)
class EpisodeTrace:
    """One played episode: observations o_0..o_T plus actions and rewards."""

    observations: tuple[Observation, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    cum_offset: float = 0.0

    def __post_init__(self) -> None:
        if len(self.observations) != len(self.actions) + 1 or len(self.actions) != len(
            self.rewards
        ):
            raise ValueError("trace lengths are inconsistent")

    @property
    def raw_score(self) -> float:
        return self.cum_offset + float(sum(self.rewards))

    def feature_samples(self) -> list[float]:
        return [feature(o) for o in self.observations]


def feature(obs: Observation) -> float:
    """Observation feature defining trajectory distinctness: ego speed."""
    return obs.ego_speed


def speed_bin_edges(v_max: float, bins: int = SPEED_BINS) -> np.ndarray:
    return np.linspace(0.0, v_max, bins + 1)


def build_density(samples: Sequence[float], edges: np.ndarray) -> FeatureHistogram:
    """Empirical density over fixed bins; samples are clipped into range."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot build a density from zero samples")
    arr = np.clip(arr, edges[0], edges[-1])
    counts, _ = np.histogram(arr, bins=edges)
    return FeatureHistogram(
        edges=np.asarray(edges, dtype=np.float64),
        masses=counts / counts.sum(),
        count=int(arr.size),
    )


def trajectory_metric(h1: FeatureHistogram, h2: FeatureHistogram) -> float:
    """L1 distance between two feature densities on identical bins (range [0, 2])."""
    if not np.array_equal(h1.edges, h2.edges):
        raise ValueError("histogram binning mismatch")
    return float(np.abs(h1.masses - h2.masses).sum())


def penalty(metric: float, cfg: PenaltyConfig) -> float:
    """Trajectory penalty -alpha / (metric + delta): harshest at zero distance."""
    if metric < 0:
        raise ValueError("metric must be >= 0")
    return -cfg.alpha / (metric + cfg.delta)


def sample_initial_state(
    cfg: PenaltyConfig,
    env: IntersectionEnv,
    params: EnvParams,
    optimal_buffer: ReplayBuffer,
    rng: np.random.Generator,
) -> tuple[EnvState, float, bool]:
    """Draw from the contingency agent's mixed initial-state distribution.

    With probability beta the state comes from the optimal agent's replay
    buffer (pre-intersection states only, falling back to a standard reset
    when the pool is empty) together with the score offset accumulated
    before it; otherwise a standard reset with offset 0. Returns
    (state, cum_offset, used_handoff). beta of exactly 0 or 1 consumes no
    mixture draw.
    """
    if cfg.beta >= 1.0:
        use_handoff = True
    elif cfg.beta <= 0.0:
        use_handoff = False
    else:
        use_handoff = bool(rng.random() < cfg.beta)
    if use_handoff:
        try:
            state, offset = optimal_buffer.sample_handoff_state(rng, params, env)
            return state, offset, True
        except HandoffPoolEmpty:
            pass
    return env.reset(params, rng), 0.0, False


@dataclass
class EpisodeRecord:
    """Per-episode training log row."""

    policy: str
    index: int
    raw_score: float  # cum_offset + env rewards, penalty excluded
    penalized_score: float  # raw_score + terminal penalty (pi1 only)
    metric: float
    epsilon: float
    steps: int
    handoff_init: bool


@dataclass
class TrainingResult:
    pi_star: DoubleQLearner
    pi_one: DoubleQLearner
    pi_star_buffer: ReplayBuffer
    pi_one_buffer: ReplayBuffer
    records: list[EpisodeRecord]


class _Agent:
    def __init__(self, name: str, learner: DoubleQLearner, buffer: ReplayBuffer, rng):
        self.name = name
        self.learner = learner
        self.buffer = buffer
        self.rng = rng
        self.episodes = 0


def _play_episode(
    env: IntersectionEnv,
    agent: _Agent,
    init_state: EnvState,
    cum_offset: float,
    train_cfg: TrainConfig,
    can_update: bool,
) -> tuple[list[Transition], EpisodeTrace]:
    state = init_state
    obs = env.observe(state)
    observations = [obs]
    actions: list[int] = []
    rewards: list[float] = []
    transitions: list[Transition] = []
    cum = cum_offset
    while True:
        a = act(agent.learner.net, obs, agent.learner.epsilon(), agent.rng)
        out = env.step(state, a)
        next_obs = env.observe(out.next_state)
        transitions.append(
            Transition(
                obs=obs,
                action=a,
                reward=out.reward,
                next_obs=next_obs,
                done=out.done,
                cum_reward_before=cum,
            )
        )
        cum += out.reward
        observations.append(next_obs)
        actions.append(a)
        rewards.append(out.reward)
        agent.learner.env_steps += 1
        if can_update:
            batch = agent.buffer.sample_batch(train_cfg.batch_size, agent.rng)
            agent.learner.train_step(batch)
        if out.done:
            break
        state = out.next_state
        obs = next_obs
    trace = EpisodeTrace(tuple(observations), tuple(actions), tuple(rewards), cum_offset)
    return transitions, trace


def train_concurrent(
    env: IntersectionEnv,
    penalty_cfg: PenaltyConfig,
    train_cfg: TrainConfig,
    seed: int,
    params: EnvParams | None = None,
    agent_seeds: tuple[int, int] | None = None,
    bins: int = SPEED_BINS,
    progress: bool = False,
) -> TrainingResult:
    """Train the optimal and contingency policies by alternating episodes.

    Each agent owns an independent rng stream (derived from `seed` unless
    `agent_seeds` pins them), so the optimal agent's trajectory does not
    depend on the contingency configuration. The trajectory metric is
    computed for every episode of both agents against the optimal agent's
    recent-buffer density, but the resulting penalty lands only on the
    contingency agent's terminal transition.
    """
    if params is None:
        params = EnvParams.all_aggressive(env.cfg.n_targets)
    if params.n != env.cfg.n_targets:
        raise ValueError("params target count must match env config n_targets")
    if agent_seeds is None:
        star_ss, one_ss = np.random.SeedSequence(seed).spawn(2)
    else:
        star_ss, one_ss = (np.random.SeedSequence(s) for s in agent_seeds)

    edges = speed_bin_edges(env.cfg.v_max, bins)
    obs_scale = default_obs_scale(env.cfg)
    agents: dict[str, _Agent] = {}
    for name, ss in ((PI_STAR, star_ss), (PI_ONE, one_ss)):
        rng = np.random.default_rng(ss)
        net = QNetwork.create(rng, n_inputs=2 + 2 * params.n, obs_scale=obs_scale)
        agents[name] = _Agent(
            name,
            DoubleQLearner(net, train_cfg),
            ReplayBuffer(train_cfg.buffer_capacity),
            rng,
        )
    star, one = agents[PI_STAR], agents[PI_ONE]
    records: list[EpisodeRecord] = []

    def run_one(agent: _Agent, contingency: bool) -> None:
        if contingency:
            init_state, offset, handoff = sample_initial_state(
                penalty_cfg, env, params, star.buffer, agent.rng
            )
        else:
            init_state, offset, handoff = env.reset(params, agent.rng), 0.0, False
        eps_log = agent.learner.epsilon()
        can_update = len(agent.buffer) >= train_cfg.update_start and (
            not contingency or star.buffer.full
        )
        transitions, trace = _play_episode(
            env, agent, init_state, offset, train_cfg, can_update
        )
        # Reference density from the optimal buffer as it stands right now
        # (this episode is not stored yet); the very first optimal episode
        # has no reference and scores metric 0 against itself.
        if len(star.buffer) > 0:
            ref_samples = star.buffer.recent_feature_samples(penalty_cfg.k_ref, feature)
        else:
            ref_samples = trace.feature_samples()
        metric = trajectory_metric(
            build_density(trace.feature_samples(), edges),
            build_density(ref_samples, edges),
        )
        pen = penalty(metric, penalty_cfg) if contingency else 0.0
        if contingency:
            last = transitions[-1]
            transitions[-1] = replace(last, reward=last.reward + pen)
        for t in transitions:
            agent.buffer.push(t)
        records.append(
            EpisodeRecord(
                policy=agent.name,
                index=agent.episodes,
                raw_score=trace.raw_score,
                penalized_score=trace.raw_score + pen,
                metric=metric,
                epsilon=eps_log,
                steps=len(trace.actions),
                handoff_init=handoff,
            )
        )
        agent.episodes += 1

    total = train_cfg.total_steps
    while star.learner.env_steps < total or one.learner.env_steps < total:
        if star.learner.env_steps < total:
            run_one(star, contingency=False)
        if one.learner.env_steps < total:
            run_one(one, contingency=True)
        if progress and star.episodes % 500 == 0:
            print(
                f"episodes {star.episodes}, steps {star.learner.env_steps}/{total}",
                file=sys.stderr,
            )

    return TrainingResult(
        pi_star=star.learner,
        pi_one=one.learner,
        pi_star_buffer=star.buffer,
        pi_one_buffer=one.buffer,
        records=records,
    )
