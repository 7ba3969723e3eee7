from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinchain_rl.dynamics import ChainSpec, ContractError, Controller, fidelity
from spinchain_rl.env import EnvConfig, SpinChainEnv, wrap_delta, wrap_time
from spinchain_rl.noise import NoiseConfig

T_PERFECT = math.pi / math.sqrt(2)


def make_env(n=3, sigma=0.0, shots=0, seed=0, **kw):
    cfg = EnvConfig(ChainSpec.uniform(n, 0, 2), NoiseConfig(sigma, shots), **kw)
    return SpinChainEnv(cfg, np.random.default_rng(seed))


class TestWrap:
    def test_overflow(self):
        assert wrap_delta(9.0 + 3.0) == pytest.approx(-8.0)

    def test_edges(self):
        assert wrap_delta(10.0) == -10.0
        assert wrap_delta(-10.0) == -10.0
        assert wrap_time(30.0) == pytest.approx(30.0)
        assert 0 < wrap_time(0.0) <= 30

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_ranges(self, x, t):
        d = wrap_delta(x)
        assert -10.0 <= d < 10.0
        assert 0.0 < wrap_time(t) <= 30.0


class TestReset:
    def test_deterministic(self):
        a, b = make_env(seed=4), make_env(seed=4)
        assert a.reset() == b.reset()

    def test_moments_and_bounds(self):
        env = make_env(n=4, seed=1)
        X = np.stack([env.reset().as_vector() for _ in range(10_000)])
        tol = 3 * (20 / math.sqrt(12)) / math.sqrt(10_000)
        assert np.all(np.abs(X[:, :4].mean(axis=0)) < tol)
        assert np.all((X[:, :4] >= -10) & (X[:, :4] <= 10))
        assert np.all((X[:, 4] > 0) & (X[:, 4] <= 30))
        assert env.calls_made == 0


class TestStep:
    def test_zero_action_reward_is_fidelity(self):
        env = make_env(n=4)
        s = env.reset()
        out = env.step(np.zeros(5))
        assert out.next_state == s
        assert out.reward == fidelity(env.cfg.spec, s)

    def test_perfect_transfer_done(self):
        env = make_env()
        env.set_state(Controller((0.0, 0.0, 0.0), T_PERFECT))
        out = env.step(np.zeros(4))
        assert out.reward == pytest.approx(1.0, abs=1e-10)
        assert out.done

    def test_bias_wraps(self):
        env = make_env()
        env.set_state(Controller((9.0, 0.0, 0.0), 5.0))
        out = env.step(np.array([3.0, 0.0, 0.0, 0.0]))
        assert out.next_state.delta[0] == pytest.approx(-8.0)

    def test_increment_clamped(self):
        env = make_env()
        env.set_state(Controller((0.0, 0.0, 0.0), 10.0))
        out = env.step(np.array([100.0, -100.0, 0.0, 100.0]))
        assert out.next_state.delta[:2] == pytest.approx((5.0, -5.0))
        assert out.next_state.read_time == pytest.approx(25.0)

    def test_time_action_scale(self):
        env = make_env()
        env.set_state(Controller((0.0, 0.0, 0.0), 10.0))
        out = env.step(np.array([0.0, 0.0, 0.0, 1.0]))
        assert out.next_state.read_time == pytest.approx(13.0)

    def test_before_reset(self):
        with pytest.raises(ContractError):
            make_env().step(np.zeros(4))

    def test_bad_action(self):
        env = make_env()
        env.reset()
        with pytest.raises(ContractError):
            env.step(np.zeros(3))
        with pytest.raises(ContractError):
            env.step(np.array([0, 0, np.nan, 0]))

    def test_counter(self):
        env = make_env(sigma=0.05, shots=10)
        env.reset()
        for k in range(1, 8):
            env.step(np.ones(4) * 0.1)
            assert env.calls_made == k
        env.evaluate_with_gradient(env.state)
        assert env.calls_made == 8
        env.true_fidelity()
        assert env.calls_made == 8

    def test_shot_grid(self):
        env = make_env(sigma=0.05, shots=7, seed=3)
        env.reset()
        for _ in range(50):
            r = env.step(np.random.default_rng(0).normal(size=4)).reward
            assert round(r * 7) == pytest.approx(r * 7, abs=1e-12)

    def test_perturbation_redrawn_each_step(self):
        env = make_env(sigma=0.05, seed=2)
        env.set_state(Controller((0.1, 0.2, 0.3), 4.0))
        rewards = {env.step(np.zeros(4)).reward for _ in range(5)}
        assert len(rewards) == 5
        assert env.true_fidelity() == fidelity(env.cfg.spec, env.state)

    def test_determinism(self):
        def run(seed):
            env = make_env(sigma=0.05, shots=100, seed=seed)
            env.reset()
            acts = np.random.default_rng(9).normal(size=(20, 4))
            return [env.step(a).reward for a in acts], env.state

        assert run(5) == run(5)

    @given(st.lists(st.lists(st.floats(-50, 50), min_size=4, max_size=4), min_size=1, max_size=10))
    def test_states_stay_in_bounds(self, actions):
        env = make_env(sigma=0.02)
        env.reset()
        for a in actions:
            out = env.step(np.array(a))
            assert out.next_state.within_bounds()
            assert 0.0 <= out.reward <= 1.0


def test_threshold_validation():
    with pytest.raises(ContractError):
        EnvConfig(ChainSpec.uniform(3), reward_threshold=1.5)
