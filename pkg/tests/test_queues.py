import numpy as np
import pytest

from improper_rl.envs import queues as qu


def test_queue_step_examples():
    assert qu.queue_step([3, 0], [0, 1], [1, 1]).tolist() == [4, 1]
    assert qu.queue_step([500, 2], [0, 1], [1, 0], cap=500).tolist() == [500, 1]
    assert qu.queue_step([0, 0], [0, 0], [0, 0]).tolist() == [0, 0]


def test_queue_step_rejects_bad_input():
    with pytest.raises(ValueError):
        qu.queue_step([1, 1], [1, 1], [0, 0], admissible=[[1, 0], [0, 1], [0, 0]])
    with pytest.raises(ValueError):
        qu.queue_step([1, 1], [1, 0], [2, 0])


def test_independent_sets_path4():
    sets = qu.path_graph_independent_sets(4)
    assert sets == sorted(sets)
    assert set(sets) == {(), (1,), (2,), (3,), (4,), (1, 3), (1, 4), (2, 4)}


def test_max_weight_choice():
    env, ctrls = qu.build_path_graph_env()
    names = env.action_names
    a = ctrls[0].act(np.array([[5, 0, 3, 0]]), None)[0]
    assert names[a] == "{1,3}"


def test_mer_choice_lexicographic_tie():
    env, ctrls = qu.build_path_graph_env(mer_tiebreak="lexicographic")
    a = ctrls[1].act(np.array([[1, 0, 1, 1]]), None)[0]
    assert env.action_names[a] == "{1,3}"


def test_mer_backlog_tiebreak_prefers_larger_backlog():
    env, ctrls = qu.build_path_graph_env()
    a = ctrls[1].act(np.array([[1, 0, 1, 4]]), None)[0]
    assert env.action_names[a] == "{1,4}"
    # the nonempty count still dominates
    a = ctrls[1].act(np.array([[9, 0, 0, 1]]), None)[0]
    assert env.action_names[a] == "{1,4}"


def test_decisions_are_independent_sets(rng):
    env, ctrls = qu.build_path_graph_env()
    Q = rng.integers(0, 20, size=(200, 4))
    for c in ctrls:
        served = env.service[c.act(Q, rng)]
        assert not np.any(served[:, :-1] & served[:, 1:])


def test_queue_lengths_stay_in_range(rng):
    env, ctrls = qu.build_two_queue_env((0.9, 0.9), cap=20)
    Q = env.reset(50, rng)
    for _ in range(300):
        Q, _ = env.step(Q, ctrls[0].act(Q, rng), rng)
        assert Q.min() >= 0 and Q.max() <= 20


def test_normalized_reward():
    env, _ = qu.build_two_queue_env(reward_mode="normalized", cap=500)
    assert env.reward(np.array([[100, 150]]))[0] == pytest.approx(1 - 250 / 1000)
    with pytest.raises(ValueError):
        qu.build_two_queue_env((0.5, 1.0))


def test_expert1_bound():
    assert qu.expert1_backlog_bound(0.49, 0.9) == pytest.approx(44.1, abs=1e-12)


def test_pure_controller_unstable(rng):
    env, ctrls = qu.build_two_queue_env((0.49, 0.49))
    Q = env.reset(200, rng)
    for _ in range(400):
        Q, _ = env.step(Q, ctrls[0].act(Q, rng), rng)
    slope = Q[:, 1].mean() / 400
    assert slope >= 0.4


def test_even_mixture_stable(rng):
    env, ctrls = qu.build_two_queue_env((0.49, 0.49), controller_spec=((0.5, 0.5),))
    Q = env.reset(10, rng)
    total = 0.0
    steps = 10_000
    for _ in range(steps):
        Q, _ = env.step(Q, ctrls[0].act(Q, rng), rng)
        total += Q.sum(axis=1).mean()
    assert total / steps < 250


def test_lqf_serves_longest(rng):
    _, ctrls = qu.build_two_queue_env(controller_spec=("lqf",))
    assert ctrls[0].act(np.array([[2, 5], [3, 3]]), rng).tolist() == [1, 0]


def test_arrival_schedule_phases():
    sched = qu.ArrivalSchedule.equal_phases([[0.3, 0.6], [0.6, 0.3], [0.49, 0.49]], 300)
    assert sched.starts == (1, 101, 201)
    assert sched.at(1).tolist() == [0.3, 0.6]
    assert sched.at(150).tolist() == [0.6, 0.3]
    assert sched.at(300).tolist() == [0.49, 0.49]


def _trace(arr, dep):
    n = len(arr)
    return qu.PacketTrace(np.zeros(n, int), np.zeros(n, int), np.asarray(arr, float), np.asarray(dep, float), 10)


def test_mean_delay_examples(tmp_path):
    assert qu.mean_delay(_trace([0], [1])) == 1.0
    assert qu.mean_delay(_trace(range(8), np.arange(8) + 1)) == 1.0
    assert qu.mean_delay(_trace([0, 2], [3, np.nan])) == 3.0
    assert qu.mean_delay(_trace([0, 2], [3, np.nan]), censor_at=10) == pytest.approx((3 + 8) / 2)
    with pytest.raises(ValueError):
        qu.mean_delay(_trace([], []))
    _trace([0, 2], [3, np.nan]).write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "packet_id,trial,queue,arrival_t,departure_t" and lines[2].endswith(",")


def test_deterministic_service_constant_delay(rng):
    env, _ = qu.build_two_queue_env((0.0, 0.0))
    env = qu.QueueEnv(env.service, qu.ArrivalSchedule([[1.0 - 1e-12, 0.0]]), env.cap)
    trace = qu.simulate_packets(env, qu.FixedAction(0, "serve1"), 50, 1, rng)
    delays = trace.departure - trace.arrival
    assert np.all(delays[~np.isnan(delays)] == 1.0)


def test_mer_delay_below_fixed_set(rng):
    env, ctrls = qu.build_path_graph_env()
    mer = qu.mean_delay(qu.simulate_packets(env, ctrls[1], 400, 20, rng), censor_at=400)
    k3 = qu.mean_delay(qu.simulate_packets(env, ctrls[2], 400, 20, rng), censor_at=400)
    assert mer < k3
