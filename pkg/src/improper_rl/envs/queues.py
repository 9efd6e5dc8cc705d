"""Discrete-time queueing networks with Bernoulli arrivals and a queue cap.

Two topologies are provided: a single server shared by two queues, and a
path-graph interference network where only independent sets of links may
transmit together.  States are integer arrays of shape (batch, N).
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_CAP = 500


def queue_step(state, decision, arrivals, cap: int = DEFAULT_CAP, admissible=None) -> np.ndarray:
    """Q' = min(cap, max(Q - D, 0) + A), elementwise (also on batches)."""
    Q = np.asarray(state)
    D = np.asarray(decision)
    A = np.asarray(arrivals)
    if admissible is not None:
        rows = np.atleast_2d(D)
        allowed = np.asarray(admissible)
        ok = (rows[:, None, :] == allowed[None, :, :]).all(axis=-1).any(axis=-1)
        if not ok.all():
            raise ValueError(f"inadmissible service decision {rows[~ok][0].tolist()}")
    if np.any((A != 0) & (A != 1)):
        raise ValueError("arrivals must be 0/1")
    return np.minimum(cap, np.maximum(Q - D, 0) + A)


def path_graph_independent_sets(N: int) -> list[tuple[int, ...]]:
    """Independent sets of the path 1-2-...-N, sorted lexicographically (1-based)."""
    sets = []
    for k in range(N + 1):
        for combo in itertools.combinations(range(1, N + 1), k):
            if all(b - a > 1 for a, b in zip(combo, combo[1:])):
                sets.append(combo)
    return sorted(sets)


def _indicator_rows(sets: Sequence[tuple[int, ...]], N: int) -> np.ndarray:
    rows = np.zeros((len(sets), N), dtype=np.int64)
    for i, s in enumerate(sets):
        rows[i, [j - 1 for j in s]] = 1
    return rows


@dataclass
class ArrivalSchedule:
    """Piecewise-constant arrival rates: phase k starts at round starts[k]."""

    rates: np.ndarray
    starts: tuple[int, ...] = (1,)

    def __post_init__(self) -> None:
        self.rates = np.atleast_2d(np.asarray(self.rates, dtype=float))
        if len(self.starts) != len(self.rates) or self.starts[0] != 1:
            raise ValueError("one start round per phase, first phase starting at round 1")
        if np.any(self.rates < 0) or np.any(self.rates >= 1):
            raise ValueError("arrival rates must lie in [0, 1)")

    @classmethod
    def equal_phases(cls, rates, total_rounds: int) -> "ArrivalSchedule":
        rates = np.atleast_2d(np.asarray(rates, dtype=float))
        k = len(rates)
        starts = tuple(1 + (total_rounds * i) // k for i in range(k))
        return cls(rates, starts)

    def at(self, t: int) -> np.ndarray:
        idx = int(np.searchsorted(np.asarray(self.starts), t, side="right")) - 1
        return self.rates[max(idx, 0)]


@dataclass
class QueueEnv:
    """Queue network started empty.

    Action k serves the queues marked in ``service[k]``.  Per-step reward is
    the negative total backlog in "backlog" mode, or 1 - total/(N cap) in
    "normalized" mode; both are computed from the state before the step.
    """

    service: np.ndarray
    schedule: ArrivalSchedule
    cap: int = DEFAULT_CAP
    reward_mode: str = "backlog"
    action_names: tuple[str, ...] = ()
    round_index: int = 1
    episodic: bool = False

    def __post_init__(self) -> None:
        self.service = np.asarray(self.service, dtype=np.int64)
        if self.reward_mode not in ("backlog", "normalized"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if self.schedule.rates.shape[1] != self.service.shape[1]:
            raise ValueError("arrival rates and service vectors disagree on the number of queues")
        self.rates = self.schedule.at(self.round_index)

    @property
    def num_queues(self) -> int:
        return self.service.shape[1]

    @property
    def num_actions(self) -> int:
        return self.service.shape[0]

    def at_round(self, t: int) -> "QueueEnv":
        if len(self.schedule.starts) == 1:
            return self
        return replace(self, round_index=t)

    def reset(self, n, rng):
        return np.zeros((n, self.num_queues), dtype=np.int64)

    def reward(self, states) -> np.ndarray:
        total = states.sum(axis=1).astype(float)
        if self.reward_mode == "backlog":
            return -total
        return 1.0 - total / (self.num_queues * self.cap)

    def step(self, states, actions, rng):
        arrivals = (rng.random(states.shape) < self.rates).astype(np.int64)
        nxt = np.minimum(self.cap, np.maximum(states - self.service[actions], 0) + arrivals)
        return nxt, self.reward(states)

    def is_terminal(self, states):
        return np.zeros(len(states), dtype=bool)


@dataclass
class FixedAction:
    action: int
    name: str

    def act(self, states, rng):
        return np.full(len(states), self.action, dtype=np.int64)


@dataclass
class RandomAction:
    """Stationary randomized rule choosing action k with probability probs[k]."""

    probs: np.ndarray
    name: str

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        self._cdf = np.cumsum(self.probs)

    def act(self, states, rng):
        u = rng.random(len(states))
        return np.minimum(np.searchsorted(self._cdf, u, side="right"), len(self.probs) - 1)


@dataclass
class WeightedArgmax:
    """Pick the service set maximizing sum of f(Q_j) over its members.

    f is the backlog itself for max-weight and the nonempty indicator for
    maximum egress rate.  With ``backlog_tiebreak`` ties in the indicator
    score are settled by total backlog; remaining ties go to the earliest
    action, which is the lexicographically smallest set when actions are
    sorted that way.
    """

    service: np.ndarray
    name: str
    indicator: bool = False
    backlog_tiebreak: bool = False

    def act(self, states, rng):
        if not self.indicator:
            return np.argmax(states @ self.service.T, axis=1)
        count = (states > 0).astype(np.int64) @ self.service.T
        if self.backlog_tiebreak:
            backlog = states @ self.service.T
            count = count * (int(states.sum(axis=1).max(initial=0)) + 1) + backlog
        return np.argmax(count, axis=1)


def build_two_queue_env(arrival_rates=(0.49, 0.49), cap: int = DEFAULT_CAP,
                        controller_spec: Sequence = ("serve1", "serve2"),
                        reward_mode: str = "backlog", schedule: ArrivalSchedule | None = None):
    """Single server, two queues.  Actions: serve queue 1, serve queue 2, idle.

    ``controller_spec`` entries: "serve1", "serve2", "lqf", or a pair
    (mu1, mu2) for the stationary rule serving queue i with probability mu_i.
    """
    if schedule is None:
        rates = np.asarray(arrival_rates, dtype=float)
        if rates.shape != (2,) or np.any(rates < 0) or np.any(rates >= 1):
            raise ValueError("two arrival rates in [0, 1) required")
        schedule = ArrivalSchedule(rates[None, :])
    service = np.array([[1, 0], [0, 1], [0, 0]])
    env = QueueEnv(service, schedule, cap, reward_mode, ("serve1", "serve2", "idle"))
    ctrls = []
    for i, spec in enumerate(controller_spec):
        if spec == "serve1":
            ctrls.append(FixedAction(0, f"K{i + 1}"))
        elif spec == "serve2":
            ctrls.append(FixedAction(1, f"K{i + 1}"))
        elif spec == "lqf":
            ctrls.append(WeightedArgmax(service[:2], "LQF"))
        else:
            mu1, mu2 = (float(x) for x in spec)
            if mu1 < 0 or mu2 < 0 or mu1 + mu2 > 1 + 1e-12:
                raise ValueError("stationary rule needs mu1, mu2 >= 0 with mu1 + mu2 <= 1")
            ctrls.append(RandomAction(np.array([mu1, mu2, max(0.0, 1 - mu1 - mu2)]), f"K{i + 1}"))
    return env, ctrls


PATH_GRAPH_FIXED_SETS = ((1, 3), (2, 4), (1, 4))


def build_path_graph_env(N: int = 4, arrival_rates=None, cap: int = DEFAULT_CAP,
                         fixed_sets: Sequence[tuple[int, ...]] = PATH_GRAPH_FIXED_SETS,
                         reward_mode: str = "backlog", mer_tiebreak: str = "backlog"):
    """Path-graph interference network with MW, MER and fixed-set controllers.

    ``mer_tiebreak`` is "backlog" (largest backlog among the sets with the
    most nonempty queues) or "lexicographic".
    """
    if mer_tiebreak not in ("backlog", "lexicographic"):
        raise ValueError(f"unknown tie-break rule {mer_tiebreak!r}")
    rates = np.full(N, 0.495) if arrival_rates is None else np.asarray(arrival_rates, dtype=float)
    sets = path_graph_independent_sets(N)
    service = _indicator_rows(sets, N)
    env = QueueEnv(service, ArrivalSchedule(rates[None, :]), cap, reward_mode,
                   tuple("{" + ",".join(map(str, s)) + "}" for s in sets))
    ctrls = [WeightedArgmax(service, "MW"), WeightedArgmax(service, "MER", indicator=True,
                                                                  backlog_tiebreak=mer_tiebreak == "backlog")]
    for k, s in enumerate(fixed_sets):
        s = tuple(sorted(s))
        if s not in sets:
            raise ValueError(f"{s} is not an independent set")
        ctrls.append(FixedAction(sets.index(s), f"K{k + 3}"))
    return env, ctrls


def expert1_backlog_bound(lam2: float, gamma: float) -> float:
    """Discounted backlog of the never-served queue from empty: lam2 gamma / (1 - gamma)^2."""
    return lam2 * gamma / (1.0 - gamma) ** 2


@dataclass
class PacketTrace:
    """Packet-level timestamps; departure is NaN for packets still queued."""

    trial: np.ndarray
    queue: np.ndarray
    arrival: np.ndarray
    departure: np.ndarray
    horizon: int = 0

    def __len__(self) -> int:
        return len(self.arrival)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["packet_id", "trial", "queue", "arrival_t", "departure_t"])
            for i in range(len(self)):
                dep = "" if np.isnan(self.departure[i]) else int(self.departure[i])
                w.writerow([i, int(self.trial[i]), int(self.queue[i]) + 1, int(self.arrival[i]), dep])


def mean_delay(trace: PacketTrace, censor_at: int | None = None) -> float:
    """Mean of departure - arrival over departed packets.

    With ``censor_at`` packets still queued count as leaving at that time,
    which keeps starved queues from vanishing out of the average.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    dep = trace.departure
    if censor_at is None:
        done = ~np.isnan(dep)
        if not done.any():
            raise ValueError("no packet departed")
        return float(np.mean(dep[done] - trace.arrival[done]))
    return float(np.mean(np.where(np.isnan(dep), censor_at, dep) - trace.arrival))


def simulate_packets(env: QueueEnv, controller, steps: int, n: int,
                     rng: np.random.Generator) -> PacketTrace:
    """Run n independent copies for ``steps`` slots under one controller.

    A packet arriving in slot t is first eligible for service in slot t+1;
    queues are FIFO and arrivals hitting the cap are dropped.
    """
    N = env.num_queues
    Q = env.reset(n, rng)
    arrived = np.zeros((steps, n, N), dtype=bool)
    served = np.zeros((steps, n, N), dtype=bool)
    for t in range(steps):
        e = env.at_round(t + 1)
        D = e.service[controller.act(Q, rng)]
        served[t] = (D > 0) & (Q > 0)
        A = rng.random(Q.shape) < e.rates
        after = np.maximum(Q - D, 0)
        accepted = A & (after < env.cap)
        arrived[t] = accepted
        Q = after + accepted
    trials, queues, arr, dep = [], [], [], []
    for i in range(n):
        for q in range(N):
            a_t = np.flatnonzero(arrived[:, i, q])
            d_t = np.flatnonzero(served[:, i, q]).astype(float)
            d = np.full(a_t.size, np.nan)
            d[:d_t.size] = d_t
            trials.append(np.full(a_t.size, i))
            queues.append(np.full(a_t.size, q))
            arr.append(a_t)
            dep.append(d)
    return PacketTrace(np.concatenate(trials), np.concatenate(queues),
                       np.concatenate(arr).astype(float), np.concatenate(dep), steps)


def mean_delay_per_trial(trace: PacketTrace, n: int, censor: bool = True) -> np.ndarray:
    out = np.empty(n)
    for i in range(n):
        sel = trace.trial == i
        sub = PacketTrace(trace.trial[sel], trace.queue[sel], trace.arrival[sel], trace.departure[sel], trace.horizon)
        out[i] = mean_delay(sub, trace.horizon if censor else None)
    return out
