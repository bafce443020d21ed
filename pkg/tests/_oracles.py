"""Shared independent oracles used by unit and acceptance tests."""

import numpy as np

from crossplan.qlearn import QNetwork, encode_batch, td_loss
from crossplan.replay_memory import Transition
from crossplan.traffic_env import ACTIONS, Observation


def random_obs(rng, n_targets=1):
    return Observation(
        ego_speed=float(rng.uniform(0, 15)),
        ego_dist_to_conflict=float(rng.uniform(-10, 60)),
        target_dists=tuple(float(rng.uniform(-10, 80)) for _ in range(n_targets)),
        target_speeds=tuple(float(rng.uniform(0, 15)) for _ in range(n_targets)),
    )


def random_batch(rng, size=8, n_targets=1):
    batch = []
    for _ in range(size):
        batch.append(
            Transition(
                obs=random_obs(rng, n_targets),
                action=ACTIONS[int(rng.integers(len(ACTIONS)))],
                reward=float(rng.normal()),
                next_obs=random_obs(rng, n_targets),
                done=bool(rng.random() < 0.2),
                cum_reward_before=0.0,
            )
        )
    return batch


def _case_is_smooth(net, batch, margin=1e-3):
    """True when the TD loss is differentiable around this (net, batch).

    The loss is piecewise smooth: relu kinks and next-state argmax ties
    are measure-zero, but a finite-difference probe can step across them.
    Reject cases with a pre-activation magnitude or a next-state argmax
    gap inside the probe's reach.
    """
    X = encode_batch([t.obs for t in batch])
    Xn = encode_batch([t.next_obs for t in batch])
    h = X / net.obs_scale
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ w + b
        if np.min(np.abs(z)) < margin:
            return False
        h = np.maximum(z, 0.0)
    qn, _ = net.forward_batch(Xn)
    top2 = np.sort(qn, axis=1)[:, -2:]
    return bool(np.min(top2[:, 1] - top2[:, 0]) > margin)


def _draw_smooth_case(rng, hidden, batch_size, max_tries=50):
    for _ in range(max_tries):
        net = QNetwork.create(rng, n_inputs=4, hidden=hidden)
        target = QNetwork.create(rng, n_inputs=4, hidden=hidden)
        batch = random_batch(rng, batch_size)
        if _case_is_smooth(net, batch):
            return net, target, batch
    raise RuntimeError("could not draw a smooth gradient-check case")


def max_fd_error(rng, n_cases, hidden=(8, 8), batch_size=8, h=1e-6, gamma=0.95):
    """Worst relative error between analytic TD gradients and central
    finite differences over random networks and batches."""
    worst = 0.0
    for _ in range(n_cases):
        net, target, batch = _draw_smooth_case(rng, hidden, batch_size)
        _, grads = td_loss(net, target, batch, gamma=gamma)
        for layer in range(len(net.weights)):
            for arr, grad in (
                (net.weights[layer], grads[layer][0]),
                (net.biases[layer], grads[layer][1]),
            ):
                flat = arr.reshape(-1)
                gflat = grad.reshape(-1)
                for k in range(flat.size):
                    orig = flat[k]
                    flat[k] = orig + h
                    lp, _ = td_loss(net, target, batch, gamma=gamma)
                    flat[k] = orig - h
                    lm, _ = td_loss(net, target, batch, gamma=gamma)
                    flat[k] = orig
                    fd = (lp - lm) / (2 * h)
                    denom = max(abs(fd) + abs(gflat[k]), 1e-6)
                    worst = max(worst, abs(fd - gflat[k]) / denom)
    return worst
