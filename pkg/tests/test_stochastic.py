import math

import numpy as np
import pytest

from improper_rl import mdp as md
from improper_rl import stochastic as st
from improper_rl.bandit import BanditInstance
from improper_rl.envs import tabular as tb

CONST = [st.ConstantController(0, "a"), st.ConstantController(0, "b")]


def test_unit_sphere():
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert abs(st.sample_unit_sphere(1, rng)[0]) == 1.0
    u = st.sample_unit_sphere(3, rng, size=50)
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
    big = st.sample_unit_sphere(4, rng, size=100_000)
    assert np.all(np.abs(big.mean(axis=0)) <= 0.02)
    with pytest.raises(ValueError):
        st.sample_unit_sphere(0, rng)


def test_rng_stream_paths():
    a = st.RngStream(7, "exp").generator(3, 1).random(5)
    b = st.RngStream(7).child("exp", 3).generator(1).random(5)
    c = st.RngStream(7, "exp").generator(3, 2).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        st.RngStream(0).generator(-1)


def test_rollout_zero_and_constant():
    rng = np.random.default_rng(0)
    assert st.rollout_return(st.ConstantRewardEnv(0.0), CONST, [0.5, 0.5], 30, 0.9, rng) == 0.0
    ret = st.rollout_return(st.ConstantRewardEnv(1.0), CONST, [0.5, 0.5], 30, 0.9, rng)
    assert ret == pytest.approx((1 - 0.9 ** 31) / 0.1, abs=1e-12)
    assert ret == pytest.approx(9.618479575523054, abs=1e-12)
    with pytest.raises(ValueError):
        st.rollout_return(st.ConstantRewardEnv(1.0), CONST, [0.5, 0.5], 0, 0.9, rng)


def test_rollout_matches_truncated_value():
    rng = np.random.default_rng(3)
    mdp, ctrl = md.random_instance(5, 3, 2, 0.9, rng)
    pi = np.array([0.3, 0.7])
    env = tb.TabularEnv(mdp)
    returns = st.rollout_returns(env, tb.tabular_controllers(ctrl), np.tile(pi, (10_000, 1)), 30, 0.9, rng)
    exact = md.truncated_value(mdp, md.induced_policy(mdp, ctrl, pi), mdp.mu, 30)
    se = returns.std(ddof=1) / math.sqrt(returns.size)
    assert abs(returns.mean() - exact) <= 3 * se


def test_rollout_stops_at_terminal():
    mdp, ctrl = tb.build_nonconcavity_example(1.0, 0.9, compensate_discount=False)
    env = tb.TabularEnv(mdp)
    rng = np.random.default_rng(5)
    returns = st.rollout_returns(env, tb.tabular_controllers(ctrl), np.tile([0.0, 1.0], (20_000, 1)), 30, 0.9, rng)
    # reward 1 is paid once, at step 1, with probability 9/16
    assert set(np.unique(returns)) <= {0.0, 0.9}
    assert returns.mean() == pytest.approx(0.9 * 9 / 16, abs=4 * 0.9 * 0.5 / math.sqrt(20_000))


def test_grad_est_zero_reward_exact():
    g = st.grad_est(st.ConstantRewardEnv(0.0), CONST, [0.2, -0.1], st.GradEstConfig(), np.random.default_rng(0))
    assert np.array_equal(g, np.zeros(2))


def test_grad_est_constant_value_mean_zero():
    rng = np.random.default_rng(11)
    cfg = st.GradEstConfig()
    est = np.array([st.grad_est(st.ConstantRewardEnv(1.0), CONST, [0.0, 0.0], cfg, rng) for _ in range(200)])
    se = est.std(axis=0, ddof=1) / math.sqrt(200)
    assert np.all(np.abs(est.mean(axis=0)) <= 3 * se)


def test_grad_est_matches_bandit_gradient():
    inst = BanditInstance.from_values([0.8, 0.2], 0.9)
    env, ctrls = tb.bandit_env(inst)
    theta = np.array([0.2, 0.0])
    cfg = st.GradEstConfig(perturb_radius=0.05, num_runs=40_000, num_rollouts=2, rollout_horizon=30)
    terms = st.grad_est_samples(env, ctrls, theta, cfg, np.random.default_rng(17))
    se = terms.std(axis=0, ddof=1) / math.sqrt(len(terms))
    exact = tb.truncated_bandit_gradient(inst, theta, 30)
    assert np.all(np.abs(terms.mean(axis=0) - exact) <= 3 * se)


def test_gradient_rescale():
    assert np.allclose(st.gradient_rescale([3.0, 4.0]), [6.0, 8.0], atol=1e-15)
    assert np.array_equal(st.gradient_rescale([0.0, 0.0]), [0.0, 0.0])
    g = np.random.default_rng(2).normal(size=5)
    assert np.linalg.norm(st.gradient_rescale(g)) == pytest.approx(10.0, abs=1e-12)
    with pytest.raises(ValueError):
        st.gradient_rescale([np.nan, 1.0])


def test_gradest_config_validation():
    assert st.GradEstConfig(num_runs=4).perturb_radius == pytest.approx(0.5)
    with pytest.raises(ValueError):
        st.GradEstConfig(perturb_radius=1.5)
    with pytest.raises(ValueError):
        st.GradEstConfig(num_rollouts=0)


def test_spge_deterministic_given_stream():
    mdp, ctrl = tb.build_chain(0.9)
    env, ctrls = tb.TabularEnv(mdp), tb.tabular_controllers(ctrl)
    cfg = st.SpgeConfig(learning_rate=0.01, rounds=15)
    h1 = st.spge_run(env, ctrls, cfg, st.GradEstConfig(), st.RngStream(4, "chain", 0), pi_star=[0.5, 0.5])
    h2 = st.spge_run(env, ctrls, cfg, st.GradEstConfig(), st.RngStream(4, "chain", 0), pi_star=[0.5, 0.5])
    assert np.array_equal(h1.theta, h2.theta) and np.array_equal(h1.V_rho, h2.V_rho)
    assert h1.cbar_t is not None and np.all(np.diff(h1.cbar_t) <= 0)


def test_spge_identical_controllers_no_drift():
    finals = []
    for trial in range(20):
        h = st.spge_run(st.ConstantRewardEnv(1.0), CONST, st.SpgeConfig(learning_rate=1e-3, rounds=40),
                        st.GradEstConfig(), st.RngStream(9, "drift", trial))
        finals.append(h.pi[-1, 0])
    finals = np.array(finals)
    assert abs(finals.mean() - 0.5) <= 3 * finals.std(ddof=1) / math.sqrt(20) + 1e-12


def test_spge_rescaled_step_size():
    h = st.spge_run(st.ConstantRewardEnv(1.0), CONST, st.SpgeConfig(learning_rate=0.01, rounds=5, rescale=True),
                    st.GradEstConfig(), st.RngStream(0))
    assert np.allclose(h.grad_norm, 10.0)
    assert np.allclose(np.linalg.norm(np.diff(h.theta, axis=0), axis=1), 0.1)
