import numpy as np
import pytest

from improper_rl import mdp as md
from improper_rl.envs import tabular as tb


@pytest.mark.parametrize("r", [1.0, 0.4])
def test_nonconcavity_values(r):
    mdp, ctrl = tb.build_nonconcavity_example(r, 0.9)
    v1, v2, vm = tb.nonconcavity_values(r, 0.9)
    assert abs(v1 - r / 16) <= 1e-12
    assert abs(v2 - 9 * r / 16) <= 1e-12
    assert abs(vm - r / 4) <= 1e-12
    assert (v1 + v2) / 2 > vm
    assert mdp.terminal_states == (2, 3, 4)
    assert np.allclose(ctrl.matrices.sum(axis=-1), 1.0)


def test_nonconcavity_uncompensated_scales_by_gamma():
    mdp, ctrl = tb.build_nonconcavity_example(1.0, 0.9, compensate_discount=False)
    V = md.policy_value(mdp, ctrl.matrices[1])
    assert V[0] == pytest.approx(0.9 * 9 / 16, abs=1e-12)
    assert not mdp.unnormalized


def test_softmax_nonconcavity_check():
    mdp, ctrl = tb.build_nonconcavity_example(1.0, 0.9)
    th1, th2 = np.log([0.9, 0.1]), np.log([0.1, 0.9])
    assert md.evaluate_policy(mdp, ctrl, th1).V_rho == pytest.approx(0.09, abs=1e-12)
    assert md.evaluate_policy(mdp, ctrl, th2).V_rho == pytest.approx(0.49, abs=1e-12)
    assert md.evaluate_policy(mdp, ctrl, (th1 + th2) / 2).V_rho == pytest.approx(0.25, abs=1e-12)
    assert tb.nonconcavity_softmax_check(1.0, 0.1)
    assert not tb.nonconcavity_softmax_check(1.0, 0.5)
    assert all(tb.nonconcavity_softmax_check(1.0, e) for e in np.linspace(0.01, 0.49, 25))
    with pytest.raises(ValueError):
        tb.nonconcavity_softmax_check(1.0, 0.0)


def test_chain_structure_and_values():
    mdp, ctrl = tb.build_chain(0.9)
    assert mdp.num_states == 10 and mdp.terminal_states == (9,)
    assert mdp.transition[9, :, 9].tolist() == [1.0, 1.0] and not mdp.reward[9].any()
    vals = {}
    for label, pi in (("K1", [1, 0]), ("K2", [0, 1]), ("mix", [0.5, 0.5])):
        pol = md.induced_policy(mdp, ctrl, np.asarray(pi, dtype=float))
        solve = float(md.policy_value(mdp, pol)[0])
        assert abs(tb.path_enumeration_value(mdp, pol, 0) - solve) <= 1e-8
        vals[label] = solve
    assert vals["K1"] == pytest.approx(vals["K2"], abs=1e-12)
    assert vals["mix"] - vals["K1"] >= 1e-6
    pure, mix = tb.chain_closed_forms(0.9)
    assert pure == pytest.approx(0.04179, abs=1e-5) and mix == pytest.approx(0.1956, abs=1e-4)


def test_path_enumeration_random(rng):
    for _ in range(5):
        mdp, ctrl = md.random_instance(6, 3, 2, 0.8, rng)
        pol = md.induced_policy(mdp, ctrl, [0.4, 0.6])
        assert tb.path_enumeration_value(mdp, pol, 2) == pytest.approx(md.policy_value(mdp, pol)[2], abs=1e-9)


def test_tabular_env_sampling(rng):
    mdp, ctrl = tb.build_chain(0.9)
    env = tb.TabularEnv(mdp)
    s = env.reset(100, rng)
    assert np.all(s == 0)
    nxt, r = env.step(np.full(100, 8), np.zeros(100, dtype=int), rng)
    assert np.all(nxt == 9) and np.all(r == 1.0)
    assert np.all(env.is_terminal(nxt))


def test_bandit_env_bernoulli_means(rng):
    from improper_rl.bandit import BanditInstance

    inst = BanditInstance.from_values([0.8, 0.2])
    env, ctrls = tb.bandit_env(inst)
    states = env.reset(20_000, rng)
    _, r = env.step(states, ctrls[0].act(states, rng), rng)
    assert set(np.unique(r)) <= {0.0, 1.0}
    assert r.mean() == pytest.approx(0.8, abs=0.02)
