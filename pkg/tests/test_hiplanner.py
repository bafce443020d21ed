import dataclasses

import numpy as np
import pytest

from crossplan.hiplanner import (
    PlannerConfig,
    belief_update,
    estimate_failure,
    initial_belief,
    rollout,
    run_episode,
    run_greedy_episode,
    sample_params,
    select_policy,
    write_planner_trace,
)
from crossplan.traffic_env import (
    AGGRESSIVE,
    COOPERATIVE,
    EnvParams,
    EnvState,
    IntersectionEnv,
    VehicleState,
)

CFG = PlannerConfig()


@pytest.fixture
def env():
    return IntersectionEnv()


def state(env, ego_pos, ego_speed, targets, behaviours, t=0):
    return EnvState(
        ego=VehicleState(ego_pos, ego_speed),
        targets=tuple(VehicleState(p, s) for p, s in targets),
        params=EnvParams(tuple(behaviours)),
        t=t,
    )


def full_throttle(obs):
    return 2


def always_brake(obs):
    return -4


class TestBeliefUpdate:
    def test_initial_belief_is_full(self):
        assert initial_belief(2) == (frozenset({0, 1}),) * 2

    def test_cooperative_target_identified(self, env):
        # Ego close to the zone: a cooperative target brakes hard while an
        # aggressive one keeps its desired speed, so one observation is
        # separable.
        prev = state(env, 30.0, 8.0, [(50.0, 12.0)], [COOPERATIVE])
        out = env.step(prev, 0)
        obs = env.observe(out.next_state)
        belief = belief_update(env, initial_belief(1), prev, obs, CFG.eps_v)
        assert belief == (frozenset({COOPERATIVE}),)

    def test_aggressive_target_identified(self, env):
        prev = state(env, 30.0, 8.0, [(50.0, 10.0)], [AGGRESSIVE])
        out = env.step(prev, 0)
        obs = env.observe(out.next_state)
        belief = belief_update(env, initial_belief(1), prev, obs, CFG.eps_v)
        assert belief == (frozenset({AGGRESSIVE}),)

    def test_indistinguishable_when_ego_far(self, env):
        # Beyond coop_distance both behaviour models predict the same speed.
        prev = state(env, 0.0, 8.0, [(30.0, 12.0)], [COOPERATIVE])
        out = env.step(prev, 0)
        obs = env.observe(out.next_state)
        belief = belief_update(env, initial_belief(1), prev, obs, CFG.eps_v)
        assert belief == (frozenset({0, 1}),)

    def test_model_mismatch_resets_with_warning(self, env, caplog):
        prev = state(env, 30.0, 8.0, [(50.0, 12.0)], [COOPERATIVE])
        out = env.step(prev, 0)
        obs = env.observe(out.next_state)
        weird = dataclasses.replace(obs, target_speeds=(5.0,))
        with caplog.at_level("WARNING"):
            belief = belief_update(env, initial_belief(1), prev, weird, CFG.eps_v)
        assert belief == (frozenset({0, 1}),)
        assert any("resetting" in r.message for r in caplog.records)

    def test_true_behaviour_never_eliminated(self, env):
        # Noiseless model soundness over random episodes and behaviours.
        rng = np.random.default_rng(0)
        for seed in range(20):
            ep_rng = np.random.default_rng(seed)
            behaviours = tuple(int(b) for b in ep_rng.integers(0, 2, 2))
            params = EnvParams(behaviours)
            s = env.reset(params, ep_rng)
            belief = initial_belief(2)
            while True:
                out = env.step(s, int(rng.choice((-4, -2, -1, 0, 1, 2))))
                belief = belief_update(
                    env, belief, s, env.observe(out.next_state), CFG.eps_v
                )
                for i, b in enumerate(behaviours):
                    assert b in belief[i]
                if out.done:
                    break
                s = out.next_state

    def test_sets_shrink_monotonically_in_noiseless_runs(self, env):
        rng = np.random.default_rng(1)
        for seed in range(10):
            params = EnvParams((COOPERATIVE, AGGRESSIVE))
            s = env.reset(params, np.random.default_rng(seed))
            belief = initial_belief(2)
            while True:
                out = env.step(s, int(rng.choice((-1, 0, 1, 2))))
                new_belief = belief_update(
                    env, belief, s, env.observe(out.next_state), CFG.eps_v
                )
                assert all(nb <= b for nb, b in zip(new_belief, belief))
                belief = new_belief
                if out.done:
                    break
                s = out.next_state


class TestSampleParams:
    def test_singletons_deterministic(self):
        belief = (frozenset({1}), frozenset({0}))
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert sample_params(belief, rng) == EnvParams((1, 0))

    def test_full_belief_uniform_over_combinations(self):
        belief = (frozenset({0, 1}), frozenset({0, 1}))
        rng = np.random.default_rng(1)
        counts = {}
        n = 10_000
        for _ in range(n):
            mu = sample_params(belief, rng).behaviours
            counts[mu] = counts.get(mu, 0) + 1
        for combo in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            assert abs(counts.get(combo, 0) / n - 0.25) < 0.02

    def test_samples_respect_belief_support(self):
        belief = (frozenset({1}), frozenset({0, 1}))
        rng = np.random.default_rng(2)
        for _ in range(100):
            mu = sample_params(belief, rng)
            assert mu.behaviours[0] == 1
            assert mu.behaviours[1] in (0, 1)


class TestRollout:
    def test_no_targets_never_fails(self, env):
        start = EnvState(VehicleState(0.0, 8.0), (), EnvParams(()), 0)
        assert rollout(env, full_throttle, EnvParams(()), start) == 0
        assert rollout(env, always_brake, EnvParams(()), start) == 0

    def test_target_already_past_never_fails(self, env):
        start = state(env, 0.0, 8.0, [(80.0, 12.0)], [AGGRESSIVE])
        assert rollout(env, always_brake, EnvParams((1,)), start) == 0

    def test_constructed_collision_geometry(self, env):
        # Full throttle from 25 m at 15 m/s: ego holds v_max, positions
        # 32.5, 40.0 -> inside [40, 48] on step 2. Aggressive target from
        # 58 m at 12 m/s: 64, 70 -> inside [70, 78] on step 2 as well.
        start = state(env, 25.0, 15.0, [(58.0, 12.0)], [AGGRESSIVE])
        assert rollout(env, full_throttle, EnvParams((1,)), start) == 1

    def test_rollout_does_not_mutate_inputs(self, env):
        start = state(env, 10.0, 8.0, [(40.0, 12.0)], [COOPERATIVE])
        snapshot = dataclasses.replace(start)
        rollout(env, full_throttle, EnvParams((1,)), start)
        assert start == snapshot

    def test_terminal_start_rejected(self, env):
        start = state(env, 50.0, 8.0, [(40.0, 12.0)], [1])
        with pytest.raises(ValueError):
            rollout(env, full_throttle, EnvParams((1,)), start)


class TestEstimateFailure:
    def test_mean_of_sampled_rollouts(self, env):
        # Stub rollout failing on 3 of 10 sampled draws.
        calls = iter([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
        cfg = PlannerConfig(m_plan=10, enumerate_limit=0)
        start = state(env, 0.0, 8.0, [(40.0, 12.0)], [1])
        est = estimate_failure(
            env,
            full_throttle,
            (frozenset({0, 1}),),
            start,
            cfg,
            rng=np.random.default_rng(0),
            rollout_fn=lambda p, mu, s: next(calls),
        )
        assert est == pytest.approx(0.3)

    def test_singleton_belief_single_rollout(self, env):
        start = state(env, 0.0, 8.0, [(40.0, 12.0)], [1])
        calls = []
        est = estimate_failure(
            env,
            full_throttle,
            (frozenset({1}),),
            start,
            CFG,
            rollout_fn=lambda p, mu, s: calls.append(mu) or 0,
        )
        assert est in (0.0, 1.0)
        assert calls == [EnvParams((1,))]

    def test_enumeration_exactness_for_mu_dependent_stub(self, env):
        # Failure iff the first target is aggressive; second target pinned
        # cooperative. Plausible set {(0,0), (1,0)} -> exactly one half.
        belief = (frozenset({0, 1}), frozenset({0}))
        start = state(env, 0.0, 8.0, [(40.0, 12.0), (50.0, 12.0)], [1, 1])
        est = estimate_failure(
            env,
            full_throttle,
            belief,
            start,
            CFG,
            rollout_fn=lambda p, mu, s: int(mu.behaviours[0] == 1),
        )
        assert est == 0.5

    def test_sampled_estimate_within_binomial_bounds(self, env):
        belief = (frozenset({0, 1}), frozenset({0, 1}))
        start = state(env, 0.0, 8.0, [(40.0, 12.0), (50.0, 12.0)], [1, 1])
        cfg = PlannerConfig(m_plan=1_000, enumerate_limit=0)
        est = estimate_failure(
            env,
            full_throttle,
            belief,
            start,
            cfg,
            rng=np.random.default_rng(3),
            rollout_fn=lambda p, mu, s: int(mu.behaviours[0] == 1),
        )
        sigma = np.sqrt(0.25 / 1_000)
        assert abs(est - 0.5) < 3 * sigma

    def test_sampling_without_rng_rejected(self, env):
        cfg = PlannerConfig(enumerate_limit=0)
        start = state(env, 0.0, 8.0, [(40.0, 12.0)], [1])
        with pytest.raises(ValueError):
            estimate_failure(env, full_throttle, (frozenset({0, 1}),), start, cfg)


class TestSelectPolicy:
    def _run(self, env, estimates):
        policies = {pid: full_throttle for pid in estimates}
        fake = iter(estimates.values())

        def fake_estimate(*args, **kwargs):
            return next(fake)

        start = state(env, 0.0, 8.0, [(40.0, 12.0)], [1])
        # Emulate select_policy's loop with stubbed estimates.
        est = {pid: e for pid, e in estimates.items()}
        chosen = next(iter(est))
        for pid, e in est.items():
            if e < est[chosen]:
                chosen = pid
        return chosen

    def test_tie_prefers_first_listed(self, env):
        assert self._run(env, {"pi_star": 0.0, "pi1": 0.0}) == "pi_star"

    def test_picks_lower_failure(self, env):
        assert self._run(env, {"pi_star": 1.0, "pi1": 0.0}) == "pi1"
        assert self._run(env, {"pi_star": 0.2, "pi1": 0.6}) == "pi_star"

    def test_select_policy_end_to_end_distinguishes(self, env):
        # Ego 15 m before the zone at 8 m/s: braking stops it at 34 m
        # (safe); full throttle reaches 40.0 m on step 3 exactly when the
        # aggressive target from 54 m arrives at 72 m, inside its zone.
        start = state(env, 25.0, 8.0, [(54.0, 12.0)], [AGGRESSIVE])
        policies = {"fast": full_throttle, "safe": always_brake}
        belief = (frozenset({1}),)
        chosen, estimates = select_policy(env, policies, belief, start, CFG)
        assert estimates == {"fast": 1.0, "safe": 0.0}
        assert chosen == "safe"

    def test_empty_portfolio_rejected(self, env):
        with pytest.raises(ValueError):
            select_policy(env, {}, initial_belief(1), None, CFG)


class TestRunEpisode:
    def test_degenerate_portfolio_equals_plain_greedy(self, env):
        params = EnvParams((1, 0))
        planner_ep = run_episode(
            env,
            {"pi": full_throttle},
            params,
            CFG,
            env_rng=np.random.default_rng(17),
            planner_rng=np.random.default_rng(99),
        )
        greedy_ep = run_greedy_episode(
            env, full_throttle, params, np.random.default_rng(17)
        )
        assert planner_ep.trace == greedy_ep.trace
        assert planner_ep.collision == greedy_ep.collision
        assert set(planner_ep.chosen) == {"pi"}

    def test_chosen_policy_constant_after_belief_collapse(self, env):
        # All-cooperative scenario staged so the yielding reaction is
        # observable early (ego already near the zone); after the belief
        # collapses to singletons the selection never changes again.
        params = EnvParams((0, 0))
        ep = run_episode(
            env,
            {"fast": full_throttle, "safe": always_brake},
            params,
            CFG,
            env_rng=np.random.default_rng(21),
        )
        collapse = next(
            (
                i
                for i, belief in enumerate(ep.beliefs)
                if all(len(s) == 1 for s in belief)
            ),
            None,
        )
        assert collapse is not None, "behaviours never became separable"
        assert len(set(ep.chosen[collapse:])) == 1

    def test_logs_one_decision_per_step(self, env):
        params = EnvParams((0, 1))
        ep = run_episode(
            env,
            {"fast": full_throttle, "safe": always_brake},
            params,
            CFG,
            env_rng=np.random.default_rng(5),
        )
        assert len(ep.chosen) == ep.steps
        assert len(ep.estimates) == ep.steps
        assert len(ep.beliefs) == ep.steps
        assert len(ep.trace.observations) == ep.steps + 1

    def test_real_state_not_mutated_by_planning(self, env):
        params = EnvParams((1, 1))
        rng = np.random.default_rng(7)
        start = env.reset(params, rng)
        snapshot = dataclasses.replace(start)
        estimate_failure(env, full_throttle, initial_belief(2), start, CFG)
        assert start == snapshot

    def test_trace_csv_written(self, env, tmp_path):
        params = EnvParams((0, 1))
        ep = run_episode(
            env,
            {"fast": full_throttle, "safe": always_brake},
            params,
            CFG,
            env_rng=np.random.default_rng(5),
        )
        path = tmp_path / "trace.csv"
        write_planner_trace(str(path), ep, ["fast", "safe"])
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",") == [
            "step",
            "belief_target_0",
            "belief_target_1",
            "fail_fast",
            "fail_safe",
            "chosen",
            "action",
        ]
        assert len(lines) == ep.steps + 1
