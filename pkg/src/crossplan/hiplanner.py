"""Hierarchical controller: belief tracking, rollouts, policy selection.

Each step the controller keeps a per-target set of behaviour hypotheses
still consistent with observed target speeds, estimates every available
policy's collision probability by greedy model rollouts over those
hypotheses, and hands control to the policy with the lowest estimate.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from math import prod
from typing import Callable, Mapping

import numpy as np

from .contingency import EpisodeTrace
from .traffic_env import (
    AGGRESSIVE,
    COOPERATIVE,
    EnvParams,
    EnvState,
    IntersectionEnv,
    Observation,
)

logger = logging.getLogger(__name__)

Policy = Callable[[Observation], int]
Belief = tuple[frozenset[int], ...]

_ALL_BEHAVIOURS = frozenset((COOPERATIVE, AGGRESSIVE))


@dataclass(frozen=True)
class PlannerConfig:
    """Rollout budgets, behaviour-elimination threshold and eval sample count."""

    m_plan: int = 32
    m_eval: int = 200
    eps_v: float = 0.5
    # Enumerate all plausible behaviour combinations when there are at most
    # this many, otherwise fall back to m_plan sampled rollouts; 0 forces
    # sampling.
    enumerate_limit: int = 16

    def __post_init__(self) -> None:
        if self.m_plan < 1 or self.m_eval < 1:
            raise ValueError("m_plan and m_eval must be >= 1")
        if self.eps_v <= 0:
            raise ValueError("eps_v must be > 0")
        if self.enumerate_limit < 0:
            raise ValueError("enumerate_limit must be >= 0")


def initial_belief(n_targets: int) -> Belief:
    """Episode-start belief: every behaviour plausible for every target."""
    return tuple(_ALL_BEHAVIOURS for _ in range(n_targets))


def belief_update(
    env: IntersectionEnv,
    belief: Belief,
    prev_state: EnvState,
    new_obs: Observation,
    eps_v: float,
) -> Belief:
    """Drop hypotheses whose one-step speed prediction misses the observation.

    For each target and each still-plausible behaviour, the previous
    kinematic state is advanced one step under that behaviour; hypotheses
    whose predicted speed differs from the observed one by eps_v or more
    are eliminated. A fully eliminated set signals model mismatch and is
    reset to all behaviours with a warning.
    """
    if len(belief) != len(prev_state.targets) or new_obs.n_targets != len(belief):
        raise ValueError("belief, state and observation target counts differ")
    updated = []
    for i, hypotheses in enumerate(belief):
        v_obs = new_obs.target_speeds[i]
        kept = frozenset(
            b
            for b in hypotheses
            if abs(env.predict_target_speed(prev_state.targets[i], prev_state.ego, b) - v_obs)
            < eps_v
        )
        if not kept:
            logger.warning(
                "belief for target %d eliminated every behaviour; resetting to full set", i
            )
            kept = _ALL_BEHAVIOURS
        updated.append(kept)
    return tuple(updated)


def sample_params(belief: Belief, rng: np.random.Generator) -> EnvParams:
    """Independent uniform draw of one plausible behaviour per target."""
    behaviours = []
    for hypotheses in belief:
        options = sorted(hypotheses)
        if len(options) == 1:
            behaviours.append(options[0])
        else:
            behaviours.append(options[int(rng.integers(len(options)))])
    return EnvParams(behaviours=tuple(behaviours))


def rollout(env: IntersectionEnv, policy: Policy, mu: EnvParams, start: EnvState) -> int:
    """Greedy playout from `start` with hidden behaviours `mu`; 1 iff collision."""
    state = env.with_behaviours(start, mu)
    if env.is_terminal(state):
        raise ValueError("rollout start state is terminal")
    while True:
        out = env.step(state, policy(env.observe(state)))
        if out.done:
            return int(out.collision)
        state = out.next_state


RolloutFn = Callable[[Policy, EnvParams, EnvState], int]


def estimate_failure(
    env: IntersectionEnv,
    policy: Policy,
    belief: Belief,
    start: EnvState,
    cfg: PlannerConfig,
    rng: np.random.Generator | None = None,
    rollout_fn: RolloutFn | None = None,
) -> float:
    """Mean rollout failure over plausible behaviour combinations.

    Small hypothesis spaces are enumerated exactly (each combination
    weighted equally, matching the independent-uniform belief); larger
    ones are estimated from m_plan sampled combinations. `rollout_fn`
    exists as a seam for estimator tests.
    """
    if rollout_fn is None:
        rollout_fn = lambda p, mu, s: rollout(env, p, mu, s)  # noqa: E731
    sets = [sorted(h) for h in belief]
    n_combos = prod(len(s) for s in sets)
    if 0 < n_combos <= cfg.enumerate_limit:
        draws = [EnvParams(tuple(c)) for c in itertools.product(*sets)]
    else:
        if rng is None:
            raise ValueError("sampled failure estimation requires an rng")
        draws = [sample_params(belief, rng) for _ in range(cfg.m_plan)]
    return float(np.mean([rollout_fn(policy, mu, start) for mu in draws]))


def select_policy(
    env: IntersectionEnv,
    policies: Mapping[str, Policy],
    belief: Belief,
    start: EnvState,
    cfg: PlannerConfig,
    rng: np.random.Generator | None = None,
) -> tuple[str, dict[str, float]]:
    """Pick the policy with the lowest estimated failure probability.

    Ties go to the earliest entry in `policies`; list the performance
    policy first to prefer it when both look equally safe.
    """
    if not policies:
        raise ValueError("policy portfolio is empty")
    estimates = {
        pid: estimate_failure(env, p, belief, start, cfg, rng) for pid, p in policies.items()
    }
    chosen = next(iter(estimates))
    for pid, e in estimates.items():
        if e < estimates[chosen]:
            chosen = pid
    return chosen, estimates


@dataclass(frozen=True)
class PlannerEpisode:
    """A hierarchical-controller episode plus its per-step planning log."""

    trace: EpisodeTrace
    chosen: tuple[str, ...]
    estimates: tuple[dict[str, float], ...]
    beliefs: tuple[Belief, ...]  # belief in effect when each decision was made
    collision: bool
    success: bool

    @property
    def steps(self) -> int:
        return len(self.trace.actions)


@dataclass(frozen=True)
class GreedyEpisode:
    trace: EpisodeTrace
    collision: bool
    success: bool

    @property
    def steps(self) -> int:
        return len(self.trace.actions)


def run_greedy_episode(
    env: IntersectionEnv,
    policy: Policy,
    params: EnvParams,
    rng: np.random.Generator,
) -> GreedyEpisode:
    """Plain greedy execution of a single policy (no planner)."""
    state = env.reset(params, rng)
    obs = env.observe(state)
    observations = [obs]
    actions: list[int] = []
    rewards: list[float] = []
    while True:
        a = policy(obs)
        out = env.step(state, a)
        obs = env.observe(out.next_state)
        observations.append(obs)
        actions.append(a)
        rewards.append(out.reward)
        if out.done:
            return GreedyEpisode(
                trace=EpisodeTrace(tuple(observations), tuple(actions), tuple(rewards)),
                collision=out.collision,
                success=out.success,
            )
        state = out.next_state


def run_episode(
    env: IntersectionEnv,
    policies: Mapping[str, Policy],
    params: EnvParams,
    cfg: PlannerConfig,
    env_rng: np.random.Generator,
    planner_rng: np.random.Generator | None = None,
) -> PlannerEpisode:
    """One hierarchical-controller episode against true behaviours `params`.

    Every step: estimate failure for each policy from the current
    kinematic state under the current belief, execute the safest policy's
    greedy action, then update the belief from the new observation. The
    true behaviours influence the planner only through those observations.
    """
    state = env.reset(params, env_rng)
    belief = initial_belief(params.n)
    obs = env.observe(state)
    observations = [obs]
    actions: list[int] = []
    rewards: list[float] = []
    chosen_log: list[str] = []
    estimate_log: list[dict[str, float]] = []
    belief_log: list[Belief] = []
    while True:
        belief_log.append(belief)
        pid, estimates = select_policy(env, policies, belief, state, cfg, planner_rng)
        a = policies[pid](obs)
        out = env.step(state, a)
        new_obs = env.observe(out.next_state)
        belief = belief_update(env, belief, state, new_obs, cfg.eps_v)
        observations.append(new_obs)
        actions.append(a)
        rewards.append(out.reward)
        chosen_log.append(pid)
        estimate_log.append(estimates)
        if out.done:
            return PlannerEpisode(
                trace=EpisodeTrace(tuple(observations), tuple(actions), tuple(rewards)),
                chosen=tuple(chosen_log),
                estimates=tuple(estimate_log),
                beliefs=tuple(belief_log),
                collision=out.collision,
                success=out.success,
            )
        state = out.next_state
        obs = new_obs


def write_planner_trace(path: str, episode: PlannerEpisode, policy_ids: list[str]) -> None:
    """Per-step planner trace CSV: beliefs, failure estimates, chosen policy."""
    n_targets = len(episode.beliefs[0]) if episode.beliefs else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["step"]
            + [f"belief_target_{i}" for i in range(n_targets)]
            + [f"fail_{pid}" for pid in policy_ids]
            + ["chosen", "action"]
        )
        for step in range(episode.steps):
            belief_cols = [
                "".join(str(b) for b in sorted(s)) for s in episode.beliefs[step]
            ]
            est = episode.estimates[step]
            writer.writerow(
                [step]
                + belief_cols
                + [est[pid] for pid in policy_ids]
                + [episode.chosen[step], episode.trace.actions[step]]
            )
