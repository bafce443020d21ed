"""1-D intersection-crossing simulator with latent target behaviours.

The ego vehicle travels along a fixed path that crosses the paths of N
oncoming targets inside a conflict zone. Each target is either cooperative
(yields while the ego is near the zone, but never drops below a crawl
speed) or aggressive (ignores the ego entirely). Behaviours are hidden
from observations, which expose kinematics only. All dynamics are
deterministic given the state and action; the only randomness is the
target spawn draw in :meth:`IntersectionEnv.reset`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIONS: tuple[int, ...] = (-4, -2, -1, 0, 1, 2)
ACTION_INDEX: dict[int, int] = {a: i for i, a in enumerate(ACTIONS)}

COOPERATIVE = 0
AGGRESSIVE = 1

# Spawn positions are quantized to this grid. Together with speeds that
# stay on a 0.5 m/s grid it keeps every path position an exact binary
# fraction, so observation distances invert back to positions exactly
# (required by replay handoff-state reconstruction).
SPAWN_GRID = 0.25


@dataclass(frozen=True)
class EnvConfig:
    """Geometry, kinematic limits and reward constants.

    Distances are meters along each vehicle's own path; the ego's conflict
    interval is [ego_conflict_start, ego_conflict_start + conflict_len]
    and every target's is [target_conflict_start, target_conflict_start +
    conflict_len] in its own coordinates. A collision is any simultaneous
    occupancy of both intervals.
    """

    n_targets: int = 2
    dt: float = 0.5
    max_steps: int = 30
    v_max: float = 15.0
    v_ego_init: float = 8.0
    v_target_des: float = 12.0
    v_target_floor: float = 2.0
    coop_distance: float = 25.0
    conflict_len: float = 8.0
    ego_conflict_start: float = 40.0
    target_conflict_start: float = 70.0
    spawn_near: float = 30.0
    spawn_far: float = 70.0
    target_accel_min: float = -4.0
    target_accel_max: float = 2.0
    target_gain: float = 2.0
    reward_collision: float = -5.0
    reward_step: float = -0.1
    obs_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.n_targets < 0:
            raise ValueError("n_targets must be >= 0")
        if self.dt <= 0 or self.max_steps < 1:
            raise ValueError("dt must be > 0 and max_steps >= 1")
        if not (0 < self.v_target_floor <= self.v_target_des <= self.v_max):
            raise ValueError("need 0 < v_target_floor <= v_target_des <= v_max")
        if not (0 <= self.v_ego_init <= self.v_max):
            raise ValueError("v_ego_init must lie in [0, v_max]")
        if self.conflict_len <= 0:
            raise ValueError("conflict_len must be > 0")
        if not (0 <= self.spawn_near <= self.spawn_far):
            raise ValueError("need 0 <= spawn_near <= spawn_far")
        if self.obs_noise < 0:
            raise ValueError("obs_noise must be >= 0")

    @property
    def ego_conflict_end(self) -> float:
        return self.ego_conflict_start + self.conflict_len

    @property
    def target_conflict_end(self) -> float:
        return self.target_conflict_start + self.conflict_len


@dataclass(frozen=True)
class EnvParams:
    """Hidden per-episode dynamics: one behaviour code per target."""

    behaviours: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(b not in (COOPERATIVE, AGGRESSIVE) for b in self.behaviours):
            raise ValueError("behaviour codes must be 0 (cooperative) or 1 (aggressive)")

    @property
    def n(self) -> int:
        return len(self.behaviours)

    @classmethod
    def all_aggressive(cls, n: int) -> "EnvParams":
        return cls(behaviours=(AGGRESSIVE,) * n)

    @classmethod
    def all_cooperative(cls, n: int) -> "EnvParams":
        return cls(behaviours=(COOPERATIVE,) * n)


@dataclass(frozen=True)
class VehicleState:
    path_pos: float
    speed: float


@dataclass(frozen=True)
class EnvState:
    ego: VehicleState
    targets: tuple[VehicleState, ...]
    params: EnvParams
    t: int


@dataclass(frozen=True)
class Observation:
    """Agent-visible projection of the state; behaviours are excluded.

    Distances are measured to the entry line of the vehicle's conflict
    interval and turn negative once the vehicle has passed it.
    """

    ego_speed: float
    ego_dist_to_conflict: float
    target_dists: tuple[float, ...]
    target_speeds: tuple[float, ...]

    @property
    def n_targets(self) -> int:
        return len(self.target_dists)


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    done: bool
    collision: bool
    success: bool


class IntersectionEnv:
    """Stateless simulator: every method is a pure function of its inputs.

    One instance can safely back many concurrent episodes; callers own the
    episode state.
    """

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg if cfg is not None else EnvConfig()

    # -- episode initialisation -------------------------------------------------

    def reset(self, params: EnvParams, rng: np.random.Generator) -> EnvState:
        """Start an episode: fixed ego start, uniformly random target spawns.

        Target spawn distances to the conflict zone are drawn uniformly
        from [spawn_near, spawn_far] on the spawn grid; targets start at
        their desired speed.
        """
        cfg = self.cfg
        if params.n < 1:
            raise ValueError("reset requires at least one target")
        ego = VehicleState(path_pos=0.0, speed=cfg.v_ego_init)
        k_lo = int(np.ceil(cfg.spawn_near / SPAWN_GRID))
        k_hi = int(np.floor(cfg.spawn_far / SPAWN_GRID))
        targets = []
        for _ in range(params.n):
            dist = int(rng.integers(k_lo, k_hi + 1)) * SPAWN_GRID
            targets.append(
                VehicleState(path_pos=cfg.target_conflict_start - dist, speed=cfg.v_target_des)
            )
        return EnvState(ego=ego, targets=tuple(targets), params=params, t=0)

    # -- target behaviour model -------------------------------------------------

    def target_accel(self, target: VehicleState, ego: VehicleState, behaviour: int) -> float:
        """Acceleration command for one target under a behaviour code.

        Aggressive targets track v_target_des regardless of the ego.
        Cooperative targets track v_target_floor instead while the ego is
        within coop_distance of its conflict zone and neither vehicle has
        cleared its zone; they never brake below the floor speed.
        """
        cfg = self.cfg
        setpoint = cfg.v_target_des
        if behaviour == COOPERATIVE:
            ego_dist = cfg.ego_conflict_start - ego.path_pos
            yielding = (
                ego.path_pos <= cfg.ego_conflict_end
                and ego_dist <= cfg.coop_distance
                and target.path_pos <= cfg.target_conflict_end
            )
            if yielding:
                setpoint = cfg.v_target_floor
        accel = cfg.target_gain * (setpoint - target.speed)
        return float(min(max(accel, cfg.target_accel_min), cfg.target_accel_max))

    def predict_target_speed(
        self, target: VehicleState, ego: VehicleState, behaviour: int
    ) -> float:
        """Target speed one step ahead under a hypothesized behaviour.

        This is exactly the speed update applied by step(), exposed so the
        belief tracker's predictions can never drift from the simulator.
        """
        cfg = self.cfg
        accel = self.target_accel(target, ego, behaviour)
        return float(min(max(target.speed + accel * cfg.dt, 0.0), cfg.v_max))

    # -- dynamics ---------------------------------------------------------------

    def step(self, state: EnvState, action: int) -> StepOutcome:
        """Advance one timestep. Raises on terminal states and unknown actions."""
        cfg = self.cfg
        if action not in ACTION_INDEX:
            raise ValueError(f"action {action!r} is not in the action set {ACTIONS}")
        if self.is_terminal(state):
            raise ValueError("cannot step a terminal state")

        # Speeds update first, positions integrate with the new speed.
        ego_speed = min(max(state.ego.speed + action * cfg.dt, 0.0), cfg.v_max)
        ego = VehicleState(path_pos=state.ego.path_pos + ego_speed * cfg.dt, speed=ego_speed)

        targets = []
        for target, b in zip(state.targets, state.params.behaviours):
            speed = self.predict_target_speed(target, state.ego, b)
            targets.append(VehicleState(path_pos=target.path_pos + speed * cfg.dt, speed=speed))

        next_state = EnvState(ego=ego, targets=tuple(targets), params=state.params, t=state.t + 1)
        collision = self.check_collision(next_state)
        cleared = self.has_cleared(next_state)
        done = collision or cleared or next_state.t >= cfg.max_steps
        success = cleared and not collision
        reward = cfg.reward_collision if collision else cfg.reward_step
        return StepOutcome(
            next_state=next_state, reward=reward, done=done, collision=collision, success=success
        )

    def reward(self, prev: EnvState, action: int, nxt: EnvState) -> float:
        """Step reward: collision penalty, otherwise a constant time cost."""
        del prev, action
        return self.cfg.reward_collision if self.check_collision(nxt) else self.cfg.reward_step

    # -- predicates -------------------------------------------------------------

    def check_collision(self, state: EnvState) -> bool:
        """True iff the ego and any target occupy their conflict intervals."""
        cfg = self.cfg
        if not (cfg.ego_conflict_start <= state.ego.path_pos <= cfg.ego_conflict_end):
            return False
        return any(
            cfg.target_conflict_start <= t.path_pos <= cfg.target_conflict_end
            for t in state.targets
        )

    def has_cleared(self, state: EnvState) -> bool:
        return state.ego.path_pos > self.cfg.ego_conflict_end

    def is_terminal(self, state: EnvState) -> bool:
        return (
            self.check_collision(state)
            or self.has_cleared(state)
            or state.t >= self.cfg.max_steps
        )

    # -- observation model ------------------------------------------------------

    def observe(self, state: EnvState, rng: np.random.Generator | None = None) -> Observation:
        """Project a state onto the agent-visible kinematic fields.

        Noiseless by default; with obs_noise > 0 an rng is required and
        uniform noise of that amplitude is added to every field.
        """
        cfg = self.cfg
        ego_speed = state.ego.speed
        ego_dist = cfg.ego_conflict_start - state.ego.path_pos
        dists = [cfg.target_conflict_start - t.path_pos for t in state.targets]
        speeds = [t.speed for t in state.targets]
        if cfg.obs_noise > 0:
            if rng is None:
                raise ValueError("obs_noise > 0 requires an rng")
            a = cfg.obs_noise
            ego_speed += float(rng.uniform(-a, a))
            ego_dist += float(rng.uniform(-a, a))
            dists = [d + float(rng.uniform(-a, a)) for d in dists]
            speeds = [s + float(rng.uniform(-a, a)) for s in speeds]
        return Observation(
            ego_speed=ego_speed,
            ego_dist_to_conflict=ego_dist,
            target_dists=tuple(dists),
            target_speeds=tuple(speeds),
        )

    def state_from_observation(
        self, obs: Observation, params: EnvParams, t: int = 0
    ) -> EnvState:
        """Invert the noiseless observation projection onto an EnvState.

        Behaviours are not recoverable from observations, so the caller
        supplies them via `params`. The step index restarts at `t`.
        """
        cfg = self.cfg
        if obs.n_targets != params.n:
            raise ValueError(
                f"observation has {obs.n_targets} targets but params has {params.n}"
            )
        ego = VehicleState(
            path_pos=cfg.ego_conflict_start - obs.ego_dist_to_conflict, speed=obs.ego_speed
        )
        targets = tuple(
            VehicleState(path_pos=cfg.target_conflict_start - d, speed=s)
            for d, s in zip(obs.target_dists, obs.target_speeds)
        )
        return EnvState(ego=ego, targets=targets, params=params, t=t)

    def with_behaviours(self, state: EnvState, params: EnvParams) -> EnvState:
        """Same kinematics, different hidden behaviours (for planner rollouts)."""
        if params.n != len(state.targets):
            raise ValueError("behaviour count must match target count")
        return replace(state, params=params)
