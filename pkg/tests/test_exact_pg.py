import numpy as np
import pytest

from improper_rl import exact_pg as ep
from improper_rl import mdp as md
from improper_rl.envs import tabular as tb
from improper_rl.errors import UnsupportedError


def test_default_learning_rate():
    assert ep.default_learning_rate(0.0) == pytest.approx(0.2, abs=1e-15)
    assert ep.default_learning_rate(0.9) == pytest.approx(0.01 / 14.27, rel=1e-12)
    assert ep.default_learning_rate(1 - 1e-9) < 1e-18
    with pytest.raises(ValueError):
        ep.default_learning_rate(1.0)
    with pytest.raises(ValueError):
        ep.default_learning_rate(-0.1)


def test_auto_learning_rate_is_inverse_smoothness():
    cfg = ep.PgRunConfig()
    assert cfg.resolve_learning_rate(0.9) == pytest.approx(2 * 0.1 ** 3 / 14.27, rel=1e-12)
    with pytest.raises(ValueError):
        ep.PgRunConfig(learning_rate=-1.0)


def test_pg_identical_controllers_constant_theta(rng):
    mdp, ctrl = md.random_instance(4, 3, 1, 0.9, rng)
    same = md.ControllerSet(np.repeat(ctrl.matrices, 2, axis=0))
    h = ep.softmax_pg_run(mdp, same, ep.PgRunConfig(horizon=50, initial_theta=[0.3, -0.2]))
    assert np.max(np.abs(h.theta - h.theta[0])) <= 1e-12


def test_pg_bandit_reduction_rate():
    gamma = 0.9
    mdp, ctrl = md.bandit_as_mdp([1.0, 0.0], np.eye(2), gamma)
    h = ep.softmax_pg_run(mdp, ctrl, ep.PgRunConfig(learning_rate=2 * (1 - gamma) / 5, horizon=3000,
                                                    initial_theta=[0.5, 0.5]),
                          v_star=1 / (1 - gamma), pi_star=[1.0, 0.0])
    assert h.pi[-1, 0] > 0.99
    assert np.all(h.delta * h.t <= 5 * 4 / (1 - gamma))


def test_pg_nonconcavity_monotone(nonconcavity):
    mdp, ctrl = nonconcavity
    h = ep.softmax_pg_run(mdp, ctrl, ep.PgRunConfig(horizon=500, initial_theta=[1.0, 1.0]))
    assert np.all(np.diff(h.V_rho) >= -1e-10)
    assert h.V_rho[-1] > h.V_rho[0]


def test_track_c_examples():
    const = np.tile([0.3, 0.7], (5, 1))
    series, c = ep.track_c(const, [0.5, 0.5])
    assert np.allclose(series, 0.3) and c == 0.3
    rising = np.column_stack([np.linspace(0.2, 0.9, 6), 1 - np.linspace(0.2, 0.9, 6)])
    series, c = ep.track_c(rising, [1.0, 0.0])
    assert np.allclose(series, 0.2) and c == pytest.approx(0.2)
    assert np.all(np.diff(ep.track_c(np.random.default_rng(0).dirichlet([1, 1, 1], 30), [0.2, 0.3, 0.5])[0]) <= 0)
    with pytest.raises(ValueError):
        ep.track_c(const, [0.0, 0.0])


def test_best_in_class_single_controller(rng):
    mdp, ctrl = md.random_instance(4, 2, 1, 0.9, rng)
    pi, v = ep.best_in_class(mdp, ctrl)
    assert np.array_equal(pi, [1.0])
    assert v == pytest.approx(mdp.rho @ md.policy_value(mdp, ctrl.matrices[0]), abs=1e-12)


def test_best_in_class_nonconcavity(nonconcavity):
    pi, v = ep.best_in_class(*nonconcavity)
    assert np.allclose(pi, [0.0, 1.0], atol=1e-9)
    assert v == pytest.approx(9 / 16, abs=1e-10)


def test_best_in_class_chain():
    pi, v = ep.best_in_class(*tb.build_chain(0.9))
    assert np.allclose(pi, [0.5, 0.5], atol=1 / 200)
    mdp, ctrl = tb.build_chain(0.9)
    assert v >= md.mixture_values(mdp, ctrl, [[0.5, 0.5]])[0] - 1e-12


def test_best_in_class_too_many_controllers(rng):
    mdp, ctrl = md.random_instance(2, 2, 7, 0.9, rng)
    with pytest.raises(UnsupportedError):
        ep.best_in_class(mdp, ctrl)


def test_smoothness_witness(rng, nonconcavity):
    mdp, ctrl = nonconcavity
    assert ep.smoothness_witness(mdp, ctrl, [0.2, 0.4], [0.2, 0.4]) == pytest.approx(0.0, abs=1e-15)
    inst, c = md.random_instance(4, 3, 3, 0.9, rng)
    for _ in range(30):
        th = rng.normal(size=3)
        d = rng.normal(size=3)
        d *= rng.uniform() / np.linalg.norm(d)
        assert ep.smoothness_witness(inst, c, th, th + d) <= 1e-10
    bm, bc = md.bandit_as_mdp([0.9, 0.2, 0.5], np.eye(3), 0.8)
    for _ in range(30):
        th = rng.normal(size=3) * 2
        d = rng.normal(size=3)
        d *= rng.uniform() / np.linalg.norm(d)
        assert ep.smoothness_witness(bm, bc, th, th + d, beta=5 / (2 * 0.2)) <= 1e-10


def test_ascent_check(rng):
    mdp, ctrl = md.random_instance(4, 3, 2, 0.9, rng)
    same = md.ControllerSet(np.repeat(ctrl.matrices[:1], 2, axis=0))
    assert ep.ascent_check(mdp, same, [0.1, 0.2], 1 / ep.smoothness_constant(0.9))
    for _ in range(20):
        assert ep.ascent_check(mdp, ctrl, rng.normal(size=2) * 2, 1 / ep.smoothness_constant(0.9))
    with pytest.raises(ValueError):
        ep.ascent_check(mdp, ctrl, [0.0, 0.0], 1.0)


def test_ascent_check_default_rate_on_nonconcavity():
    mdp, ctrl = tb.build_nonconcavity_example(1.0, 0.5)
    assert ep.ascent_check(mdp, ctrl, [1.0, 1.0], ep.default_learning_rate(0.5))
    mdp9, ctrl9 = tb.build_nonconcavity_example(1.0, 0.9)
    # at gamma=0.9 the default rate exceeds 1/beta so the guarantee does not apply
    with pytest.raises(ValueError):
        ep.ascent_check(mdp9, ctrl9, [1.0, 1.0], ep.default_learning_rate(0.9))


def test_lojasiewicz_examples(nonconcavity):
    mdp, ctrl = nonconcavity
    mdp = mdp.with_distributions(np.full(5, 0.2))
    pi_star, _ = ep.best_in_class(mdp, ctrl)
    gap = ep.lojasiewicz_gap(mdp, ctrl, [1.0, 1.0], pi_star)
    assert gap.lhs >= gap.rhs - 1e-10
    at_opt = ep.lojasiewicz_gap(mdp, ctrl, [-30.0, 30.0], pi_star)
    assert abs(at_opt.rhs) <= 1e-12 and at_opt.satisfied


def test_convergence_rate_bound():
    assert ep.convergence_rate_bound(2, 0.9, 1000, 0.5, (1.0, 1.0)) == pytest.approx(114.16, rel=1e-12)
    assert ep.convergence_rate_bound(2, 0.9, 1e15, 0.5, (1.0, 1.0)) < 1e-9
    with pytest.raises(ValueError):
        ep.convergence_rate_bound(2, 0.9, 10, 0.0, (1.0, 1.0))


def test_trajectory_below_bound_on_nonconcavity():
    mdp, ctrl = tb.build_nonconcavity_example(1.0, 0.9, compensate_discount=False)
    mdp = mdp.with_distributions(np.full(5, 0.2))
    pi_star, v_star = ep.best_in_class(mdp, ctrl)
    h = ep.softmax_pg_run(mdp, ctrl, ep.PgRunConfig(horizon=1000), v_star=v_star, pi_star=pi_star)
    assert h.cbar > 0
    bound = ep.convergence_rate_bound(2, 0.9, h.t, h.cbar, ep.instance_norms(mdp, ctrl, pi_star))
    assert np.all(h.delta <= bound)
    assert np.all(np.diff(h.delta) <= 1e-12)
