"""Feed-forward action-value network with double Q-learning.

Hand-rolled numpy MLP: forward pass, backprop and plain SGD, no autograd.
Action selection for the TD bootstrap uses the online parameters while the
frozen target network evaluates the selected action. Observations are
scaled per input dimension before entering the network; the scaling vector
is part of the network so checkpoints reproduce q-values bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .replay_memory import Transition
from .traffic_env import ACTIONS, ACTION_INDEX, EnvConfig, Observation

CHECKPOINT_MAGIC = b"CPQN"
CHECKPOINT_VERSION = 1

DIST_SCALE = 100.0  # meters; speeds are scaled by v_max


class QDivergenceError(RuntimeError):
    """Raised when a forward pass or loss produces non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    gamma: float = 0.95
    batch_size: int = 64
    target_sync: int = 1_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 100_000
    total_steps: int = 150_000
    buffer_capacity: int = 50_000
    update_start: int = 1_000

    def __post_init__(self) -> None:
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must lie in (0, 1]")
        for name in ("eps_start", "eps_end"):
            v = getattr(self, name)
            if not (0 <= v <= 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if min(self.batch_size, self.target_sync, self.eps_decay_steps, self.total_steps) < 1:
            raise ValueError("batch_size, target_sync, eps_decay_steps, total_steps must be >= 1")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be >= batch_size")
        if self.update_start < self.batch_size:
            raise ValueError("update_start must be >= batch_size")

    def epsilon_at(self, env_steps: int) -> float:
        if env_steps >= self.eps_decay_steps:
            return self.eps_end
        frac = env_steps / self.eps_decay_steps
        return self.eps_start + (self.eps_end - self.eps_start) * frac


def encode_observation(obs: Observation) -> np.ndarray:
    """Raw observation vector: ego speed, ego distance, then per-target (distance, speed)."""
    vec = [obs.ego_speed, obs.ego_dist_to_conflict]
    for d, s in zip(obs.target_dists, obs.target_speeds):
        vec.append(d)
        vec.append(s)
    return np.asarray(vec, dtype=np.float64)


def encode_batch(observations: Sequence[Observation]) -> np.ndarray:
    return np.stack([encode_observation(o) for o in observations])


def default_obs_scale(cfg: EnvConfig) -> np.ndarray:
    """Per-dimension divisors: distances by 100 m, speeds by v_max."""
    scale = [cfg.v_max, DIST_SCALE]
    for _ in range(cfg.n_targets):
        scale.extend((DIST_SCALE, cfg.v_max))
    return np.asarray(scale, dtype=np.float64)


class QNetwork:
    """Rectifier MLP mapping a scaled observation vector to one value per action."""

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        obs_scale: np.ndarray,
        activation: str = "relu",
    ):
        if activation != "relu":
            raise ValueError(f"unsupported activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.obs_scale = np.asarray(obs_scale, dtype=np.float64)
        self.activation = activation
        if self.weights[0].shape[0] != self.obs_scale.shape[0]:
            raise ValueError("obs_scale length must match the input dimension")

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        n_inputs: int,
        n_actions: int = len(ACTIONS),
        hidden: Sequence[int] = (64, 64),
        obs_scale: np.ndarray | None = None,
    ) -> "QNetwork":
        """He-initialised network; biases start at zero."""
        sizes = [n_inputs, *hidden, n_actions]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        if obs_scale is None:
            obs_scale = np.ones(n_inputs)
        return cls(weights, biases, obs_scale)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_actions(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "QNetwork":
        return QNetwork(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.obs_scale.copy(),
            self.activation,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Single raw observation vector -> action values."""
        h = np.asarray(x, dtype=np.float64) / self.obs_scale
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    def forward_batch(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batch forward pass; returns Q and the activations needed by backprop."""
        h = X / self.obs_scale
        acts = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        q = h @ self.weights[-1] + self.biases[-1]
        return q, acts

    def backprop(
        self, acts: list[np.ndarray], dq: np.ndarray
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Gradients of a scalar loss wrt every (W, b), given dLoss/dQ.

        Relies on relu(z) > 0 iff z > 0, so the stored activations double
        as the derivative mask.
        """
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)  # type: ignore
        delta = dq
        for layer in range(len(self.weights) - 1, -1, -1):
            grads[layer] = (acts[layer].T @ delta, delta.sum(axis=0))
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (acts[layer] > 0)
        return grads

    def apply_gradients(
        self, grads: Sequence[tuple[np.ndarray, np.ndarray]], learning_rate: float
    ) -> None:
        for (dw, db), w, b in zip(grads, self.weights, self.biases):
            w -= learning_rate * dw
            b -= learning_rate * db


class TargetNetwork:
    """Frozen parameter copy; changes only through sync()."""

    def __init__(self, source: QNetwork):
        self.net = source.copy()
        self.staleness = 0

    def sync(self, source: QNetwork) -> None:
        self.net = source.copy()
        self.staleness = 0


def q_values(net: QNetwork, obs: Observation) -> np.ndarray:
    x = encode_observation(obs)
    if x.shape[0] != net.n_inputs:
        raise ValueError(f"observation dimension {x.shape[0]} != network input {net.n_inputs}")
    if not np.all(np.isfinite(x)):
        raise ValueError("observation contains non-finite values")
    return net.forward(x)


def act(
    net: QNetwork, obs: Observation, epsilon: float, rng: np.random.Generator | None = None
) -> int:
    """Epsilon-greedy action; greedy ties break to the lowest action index.

    epsilon == 0 is fully deterministic and needs no rng.
    """
    if not (0 <= epsilon <= 1):
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0:
        if rng is None:
            raise ValueError("epsilon > 0 requires an rng")
        if rng.random() < epsilon:
            return ACTIONS[int(rng.integers(len(ACTIONS)))]
    return ACTIONS[int(np.argmax(q_values(net, obs)))]


def greedy_policy(net: QNetwork):
    """Observation -> action callable used by rollouts and evaluation."""
    return lambda obs: act(net, obs, epsilon=0.0)


def td_loss(
    net: QNetwork,
    target: QNetwork,
    batch: Sequence[Transition],
    gamma: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean squared double-Q TD error and its gradients wrt the online net.

    Per transition the target is r + gamma * Q_target(o', argmax_a Q(o', a)),
    or r alone when the transition is terminal; the bootstrap term is a
    constant, gradients flow only through Q(o, a).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    n = len(batch)
    X = encode_batch([t.obs for t in batch])
    Xn = encode_batch([t.next_obs for t in batch])
    a_idx = np.array([ACTION_INDEX[t.action] for t in batch])
    r = np.array([t.reward for t in batch])
    live = np.array([0.0 if t.done else 1.0 for t in batch])

    q, acts = net.forward_batch(X)
    qn_online, _ = net.forward_batch(Xn)
    qn_target, _ = target.forward_batch(Xn)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qn_online)) and np.all(np.isfinite(qn_target))):
        raise QDivergenceError(
            "non-finite action values in forward pass "
            f"(|q|max={np.max(np.abs(q[np.isfinite(q)]), initial=0.0):.3e})"
        )

    rows = np.arange(n)
    a_star = np.argmax(qn_online, axis=1)
    bootstrap = qn_target[rows, a_star]
    y = r + gamma * bootstrap * live
    err = q[rows, a_idx] - y
    loss = float(np.mean(err**2))

    dq = np.zeros_like(q)
    dq[rows, a_idx] = 2.0 * err / n
    return loss, net.backprop(acts, dq)


class DoubleQLearner:
    """Online network, frozen target and SGD bookkeeping for one agent."""

    def __init__(self, net: QNetwork, cfg: TrainConfig):
        self.net = net
        self.target = TargetNetwork(net)
        self.cfg = cfg
        self.env_steps = 0
        self.updates = 0

    def epsilon(self) -> float:
        return self.cfg.epsilon_at(self.env_steps)

    def train_step(self, batch: Sequence[Transition]) -> float:
        """One SGD update; the target re-syncs every target_sync updates."""
        loss, grads = td_loss(self.net, self.target.net, batch, self.cfg.gamma)
        self.net.apply_gradients(grads, self.cfg.learning_rate)
        self.updates += 1
        self.target.staleness += 1
        if self.updates % self.cfg.target_sync == 0:
            self.target.sync(self.net)
        return loss


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path: str, net: QNetwork, meta: dict | None = None) -> None:
    """Versioned binary checkpoint: JSON header plus packed float64 arrays."""
    header = {
        "activation": net.activation,
        "sizes": [net.n_inputs] + [w.shape[1] for w in net.weights],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = [net.obs_scale]
    for w, b in zip(net.weights, net.biases):
        arrays.extend((w, b))
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<H", len(arrays)))
        for arr in arrays:
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[QNetwork, dict]:
    """Rebuild a network bit-identically; returns (network, caller meta)."""
    with open(path, "rb") as f:
        magic, version, blob_len = struct.unpack("<4sHI", f.read(struct.calcsize("<4sHI")))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a q-network checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(blob_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<H", f.read(2))
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = f.read(8 * int(np.prod(shape)))
            arrays.append(np.frombuffer(data, dtype="<f8").reshape(shape).copy())
    obs_scale = arrays[0]
    weights = arrays[1::2]
    biases = arrays[2::2]
    net = QNetwork(weights, biases, obs_scale, activation=header["activation"])
    return net, header["meta"]
