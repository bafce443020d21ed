"""Fixed-capacity FIFO experience store with uniform sampling.

Besides ordinary batch sampling this buffer serves two special roles: it
exposes the most recent observations as feature samples (the reference
density for the trajectory penalty) and it draws pre-intersection states
for contingency-episode initialization, mapping stored observations back
onto environment states.

Single writer by contract; readers are only safe between writes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .traffic_env import ACTIONS, EnvParams, EnvState, IntersectionEnv, Observation

SNAPSHOT_MAGIC = b"CPRB"
SNAPSHOT_VERSION = 1

# Rejection-sampling attempts before falling back to a full eligibility scan.
_HANDOFF_MAX_TRIES = 64


class HandoffPoolEmpty(Exception):
    """No stored transition has the ego before the conflict zone."""


@dataclass(frozen=True)
class Transition:
    """One stored step.

    cum_reward_before is the undiscounted return attributed to the episode
    before this step, including any initial-state score offset; it lets a
    later episode seeded from this state inherit the matching score.
    """

    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    done: bool
    cum_reward_before: float


class ReplayBuffer:
    """Ring buffer of transitions with strictly FIFO eviction."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._ring: list[Transition] = []
        self._next = 0  # ring slot for the next push
        self.inserted = 0  # lifetime insertion counter

    def __len__(self) -> int:
        return len(self._ring)

    @property
    def full(self) -> bool:
        return len(self._ring) == self.capacity

    def push(self, transition: Transition) -> None:
        if len(self._ring) < self.capacity:
            self._ring.append(transition)
        else:
            self._ring[self._next] = transition
        self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def __iter__(self) -> Iterator[Transition]:
        """Iterate in insertion order, oldest first."""
        if len(self._ring) < self.capacity:
            yield from self._ring
        else:
            yield from self._ring[self._next:]
            yield from self._ring[: self._next]

    def sample_batch(self, n: int, rng: np.random.Generator) -> list[Transition]:
        """n uniform draws with replacement; requires size >= n."""
        size = len(self._ring)
        if size < n:
            raise ValueError(f"cannot sample {n} transitions from buffer of size {size}")
        idx = rng.integers(0, size, size=n)
        return [self._ring[i] for i in idx]

    def recent_feature_samples(
        self, k: int, phi: Callable[[Observation], float]
    ) -> list[float]:
        """phi over the min(k, size) most recently pushed observations, oldest first."""
        size = len(self._ring)
        if size < 1:
            raise ValueError("buffer is empty")
        k = min(k, size)
        if len(self._ring) < self.capacity:
            recent = self._ring[-k:]
        else:
            ordered = self._ring[self._next:] + self._ring[: self._next]
            recent = ordered[-k:]
        return [phi(t.obs) for t in recent]

    def sample_handoff_state(
        self, rng: np.random.Generator, params: EnvParams, env: IntersectionEnv
    ) -> tuple[EnvState, float]:
        """Uniform draw over stored states where the ego has not passed the zone.

        The sampled observation is mapped back onto an EnvState carrying
        the caller's EnvParams (the hidden behaviours of the episode about
        to be played, not the ones the transition was recorded under).
        Raises HandoffPoolEmpty when no stored transition is eligible.
        """
        size = len(self._ring)
        if size == 0:
            raise HandoffPoolEmpty("replay buffer is empty")
        chosen: Transition | None = None
        for _ in range(_HANDOFF_MAX_TRIES):
            t = self._ring[int(rng.integers(0, size))]
            if t.obs.ego_dist_to_conflict > 0:
                chosen = t
                break
        if chosen is None:
            eligible = [t for t in self._ring if t.obs.ego_dist_to_conflict > 0]
            if not eligible:
                raise HandoffPoolEmpty("no pre-intersection states in buffer")
            chosen = eligible[int(rng.integers(0, len(eligible)))]
        state = env.state_from_observation(chosen.obs, params=params, t=0)
        return state, chosen.cum_reward_before

    # -- snapshot ---------------------------------------------------------------

    def save(self, path: str) -> None:
        """Write a versioned binary snapshot (little-endian packed records)."""
        n_targets = self._ring[0].obs.n_targets if self._ring else 0
        header = struct.pack(
            "<4sHHQQQ",
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            n_targets,
            self.capacity,
            len(self._ring),
            self.inserted,
        )
        rec = struct.Struct(_record_format(n_targets))
        with open(path, "wb") as f:
            f.write(header)
            for t in self:
                f.write(rec.pack(*_record_fields(t)))

    @classmethod
    def load(cls, path: str) -> "ReplayBuffer":
        with open(path, "rb") as f:
            header = f.read(struct.calcsize("<4sHHQQQ"))
            magic, version, n_targets, capacity, size, inserted = struct.unpack(
                "<4sHHQQQ", header
            )
            if magic != SNAPSHOT_MAGIC:
                raise ValueError("not a replay-buffer snapshot")
            if version != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            buf = cls(capacity=capacity)
            rec = struct.Struct(_record_format(n_targets))
            for _ in range(size):
                fields = rec.unpack(f.read(rec.size))
                buf.push(_record_to_transition(fields, n_targets))
            # Records were written oldest-first, so the ring is already
            # aligned; only the lifetime counter needs restoring.
            buf.inserted = inserted
        return buf


def _record_format(n_targets: int) -> str:
    obs = "d" * (2 + 2 * n_targets)
    return "<" + obs + "bd" + obs + "Bd"


def _obs_fields(o: Observation) -> tuple[float, ...]:
    out = [o.ego_speed, o.ego_dist_to_conflict]
    for d, s in zip(o.target_dists, o.target_speeds):
        out.extend((d, s))
    return tuple(out)


def _record_fields(t: Transition) -> tuple:
    return (
        *_obs_fields(t.obs),
        ACTIONS.index(t.action),
        t.reward,
        *_obs_fields(t.next_obs),
        int(t.done),
        t.cum_reward_before,
    )


def _fields_to_obs(vals: Sequence[float], n_targets: int) -> Observation:
    return Observation(
        ego_speed=vals[0],
        ego_dist_to_conflict=vals[1],
        target_dists=tuple(vals[2 + 2 * i] for i in range(n_targets)),
        target_speeds=tuple(vals[3 + 2 * i] for i in range(n_targets)),
    )


def _record_to_transition(fields: Sequence, n_targets: int) -> Transition:
    w = 2 + 2 * n_targets
    return Transition(
        obs=_fields_to_obs(fields[:w], n_targets),
        action=ACTIONS[fields[w]],
        reward=fields[w + 1],
        next_obs=_fields_to_obs(fields[w + 2 : 2 * w + 2], n_targets),
        done=bool(fields[2 * w + 2]),
        cum_reward_before=fields[2 * w + 3],
    )
