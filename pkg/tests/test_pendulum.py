import math

import numpy as np
import pytest

from improper_rl.envs import pendulum as pd
from improper_rl.errors import NumericalError
from improper_rl.stochastic import ConstantController


def test_pendulum_entries():
    model = pd.build_pendulum()
    assert model.A_c[1, 2] == pytest.approx(9.8 / (4 / 3 - 0.1 / 1.1), rel=1e-12)
    assert model.A_c[1, 2] == pytest.approx(7.8878, abs=1e-4)
    assert model.b_c[1] == pytest.approx(1 / 1.1, rel=1e-12)
    assert np.allclose(pd.build_pendulum(dt=1e-9).A_d, np.eye(4), atol=1e-7)
    assert pd.spectral_radius(model.A_d) > 1
    with pytest.raises(ValueError):
        pd.build_pendulum(m_p=-1)
    with pytest.raises(ValueError):
        pd.build_pendulum(dt=0.5)


def test_scalar_dare_against_quadratic():
    # p = 1 + 0.25 p - 0.25 p^2 / (1 + p) reduces to p^2 - 0.25 p - 1 = 0
    p = (0.25 + math.sqrt(0.0625 + 4)) / 2
    K = pd.dare_solve(np.array([[0.5]]), np.array([1.0]), np.eye(1), 1.0)
    assert K[0] == pytest.approx(p * 0.5 / (1 + p), abs=1e-10)


def test_dare_matches_scipy():
    linalg = pytest.importorskip("scipy.linalg")
    model = pd.build_pendulum()
    K = pd.dare_solve(model.A_d, model.b_d, np.eye(4), 1.0)
    b = model.b_d[:, None]
    P = linalg.solve_discrete_are(model.A_d, b, np.eye(4), np.eye(1))
    K_ref = np.linalg.solve(1.0 + b.T @ P @ b, b.T @ P @ model.A_d)[0]
    assert np.allclose(K, K_ref, rtol=1e-6, atol=1e-8)
    assert pd.spectral_radius(model.A_d - np.outer(model.b_d, K)) < 1


def test_dare_zero_state_cost_on_stable_system():
    K = pd.dare_solve(np.diag([0.5, 0.3]), np.array([1.0, 1.0]), np.zeros((2, 2)), 1.0)
    assert np.allclose(K, 0.0, atol=1e-12)


def test_dare_rejects_bad_costs():
    with pytest.raises(ValueError):
        pd.dare_solve(np.eye(1), np.ones(1), np.eye(1), 0.0)
    with pytest.raises(ValueError):
        pd.dare_solve(np.eye(1), np.ones(1), -np.eye(1), 1.0)
    with pytest.raises((NumericalError, RuntimeError)):
        pd.dare_solve(np.array([[2.0]]), np.array([0.0]), np.eye(1), 1.0, max_iter=1000)


def test_epls_contraction():
    A = 0.5 * np.eye(3)
    res = pd.epls_simulate([A], [1.0], np.ones(3), 1000, np.random.default_rng(0))
    assert res.lyapunov_estimate <= math.log(0.5) + 1e-12
    with pytest.raises(ValueError):
        pd.epls_simulate([A], [1.0], np.zeros(3), 10, np.random.default_rng(0))


def test_epls_no_overflow_on_expanding_system():
    res = pd.epls_simulate([3.0 * np.eye(2)], [1.0], np.ones(2), 5000, np.random.default_rng(0))
    assert res.lyapunov_estimate == pytest.approx(math.log(3.0), abs=1e-12)


def test_epls_bound_on_random_switching():
    rng = np.random.default_rng(1)
    mats = [rng.normal(size=(3, 3)) * 0.4 for _ in range(2)]
    est = [pd.epls_simulate(mats, [0.5, 0.5], np.ones(3), 10_000, np.random.default_rng(s)).lyapunov_estimate
           for s in range(20)]
    assert np.median(est) <= pd.epls_upper_bound(mats, [0.5, 0.5]) + 0.05


def test_cartpole_lqr_survives_without_noise():
    model = pd.build_pendulum()
    K = pd.dare_solve(model.A_d, model.b_d, np.eye(4), 1.0)
    env = pd.CartpoleEnv(model, noise_std=0.0)
    steps = pd.uptime(env, [pd.LinearFeedback(K, "opt")], [1.0], 20, np.random.default_rng(0))
    assert np.all(steps == 500)


def test_cartpole_falls_without_control():
    env = pd.CartpoleEnv(pd.build_pendulum(), noise_std=0.0)
    steps = pd.uptime(env, [pd.LinearFeedback(np.zeros(4), "zero")], [1.0], 20, np.random.default_rng(0))
    assert np.all(steps < 500)


def test_cartpole_reward_and_terminal():
    env = pd.CartpoleEnv(pd.build_pendulum(), noise_std=0.0, episode_len=3)
    s = np.array([[0.0, 0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 3.0]])
    assert env.is_terminal(s).tolist() == [True, True]
    _, r = env.step(s, ConstantController(0).act(s, None).astype(float), np.random.default_rng(0))
    assert r.tolist() == [0.0, 1.0]
