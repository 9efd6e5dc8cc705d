"""Single-state specialization: the learner picks among arm-selection controllers.

Each base controller is a distribution over arms, so the value of a mixture
is linear in the mixture weights.  Two learners are provided: exact-gradient
softmax PG and the projection-free direct-parameterization update that only
sees sampled Bernoulli rewards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exact_pg import PgHistory
from .mdp import softmax

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class BanditInstance:
    arm_means: np.ndarray
    controllers: np.ndarray
    gamma: float = 0.9

    def __post_init__(self) -> None:
        means = np.array(self.arm_means, dtype=float)
        K = np.atleast_2d(np.array(self.controllers, dtype=float))
        if means.ndim != 1 or np.any(means < 0) or np.any(means > 1):
            raise ValueError("arm means must be a vector in [0, 1]")
        if K.shape[1] != means.size:
            raise ValueError("each controller needs one probability per arm")
        if np.any(K < 0) or np.any(np.abs(K.sum(axis=1) - 1) > SIMPLEX_TOL):
            raise ValueError("controllers must be distributions over arms")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for a in (means, K):
            a.setflags(write=False)
        object.__setattr__(self, "arm_means", means)
        object.__setattr__(self, "controllers", K)
        object.__setattr__(self, "gamma", float(self.gamma))

    @classmethod
    def from_values(cls, values, gamma: float = 0.9) -> "BanditInstance":
        """Controller m deterministically pulls an arm with mean values[m]."""
        values = np.asarray(values, dtype=float)
        return cls(values, np.eye(values.size), gamma)

    @property
    def M(self) -> int:
        return self.controllers.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self.controllers @ self.arm_means

    @property
    def best(self) -> int:
        return int(np.argmax(self.values))

    @property
    def gaps(self) -> np.ndarray:
        v = self.values
        return v.max() - v

    @property
    def min_gap(self) -> float:
        g = self.gaps
        pos = g[g > 0]
        return float(pos.min()) if pos.size else 0.0

    @property
    def v_star(self) -> float:
        return float(self.values.max()) / (1.0 - self.gamma)


def bandit_value(instance: BanditInstance, pi) -> float:
    return float(np.asarray(pi, dtype=float) @ instance.values) / (1.0 - instance.gamma)


def bandit_gradient(instance: BanditInstance, theta) -> np.ndarray:
    pi = softmax(theta)
    v = instance.values
    return pi * (v - pi @ v) / (1.0 - instance.gamma)


def bandit_smoothness(gamma: float) -> float:
    return 5.0 / (2.0 * (1.0 - gamma))


def exact_pg_bound(M: int, gamma: float, t):
    """5 M^2 / ((1 - gamma) t)."""
    return 5.0 * M * M / ((1.0 - gamma) * np.asarray(t, dtype=float))


def regret_envelope(M: int, gamma: float, T):
    T = np.asarray(T, dtype=float)
    log_branch = 5.0 * M * M * np.log(T) / (1.0 - gamma)
    sqrt_branch = math.sqrt(5.0 / (1.0 - gamma)) * M * np.sqrt(T)
    return np.minimum(log_branch, sqrt_branch)


def bandit_exact_pg(instance: BanditInstance, T: int, learning_rate: float | None = None,
                    initial_theta=None) -> PgHistory:
    """Exact softmax PG from the uniform mixture with step 2(1 - gamma)/5."""
    if T < 1:
        raise ValueError("T must be at least 1")
    M = instance.M
    eta = 2.0 * (1.0 - instance.gamma) / 5.0 if learning_rate is None else float(learning_rate)
    theta = np.full(M, 1.0 / M) if initial_theta is None else np.array(initial_theta, dtype=float)
    v = instance.values
    scale = 1.0 / (1.0 - instance.gamma)
    thetas = np.empty((T, M))
    pis = np.empty((T, M))
    vals = np.empty(T)
    gnorm = np.empty(T)
    for k in range(T):
        pi = softmax(theta)
        mean = pi @ v
        grad = scale * pi * (v - mean)
        thetas[k], pis[k] = theta, pi
        vals[k] = scale * mean
        gnorm[k] = np.linalg.norm(grad)
        theta = theta + eta * grad
    hist = PgHistory(t=np.arange(1, T + 1), theta=thetas, pi=pis, V_rho=vals, V_mu=vals,
                     grad_norm=gnorm, final_theta=theta)
    hist.delta = instance.v_star - vals
    hist.extras["cum_regret"] = np.cumsum(hist.delta)
    star = pis[:, instance.best]
    hist.cbar_t = np.minimum.accumulate(star)
    hist.cbar = float(hist.cbar_t[-1])
    return hist


def regret(pi_history, instance: BanditInstance) -> np.ndarray:
    """Cumulative sum of V* - V(pi_t) computed from the known instance."""
    pis = np.atleast_2d(np.asarray(pi_history, dtype=float))
    if pis.shape[0] == 0:
        raise ValueError("empty history")
    return np.cumsum(instance.v_star - pis @ instance.values / (1.0 - instance.gamma))


def alpha_threshold(instance: BanditInstance) -> float:
    """Delta_min / (v* - Delta_min); step scales below this keep the analysis valid."""
    dmin = instance.min_gap
    if dmin <= 0:
        raise ValueError("need a strictly positive gap")
    denom = float(instance.values.max()) - dmin
    return math.inf if denom <= 0 else dmin / denom


def default_step_scale(instance: BanditInstance) -> float:
    return 0.9 * min(1.0, alpha_threshold(instance))


def regret_constant(instance: BanditInstance, step_scale: float) -> float:
    """Leading log(T) coefficient of the projection-free regret bound."""
    gaps = np.delete(instance.gaps, instance.best)
    dmin = instance.min_gap
    return float(np.sum(gaps / (step_scale * dmin * dmin))) / (1.0 - instance.gamma)


def expected_increment(instance: BanditInstance, pi, step_scale: float) -> np.ndarray:
    """Conditional mean of one projection-free update given pi."""
    pi = np.asarray(pi, dtype=float)
    v = instance.values
    lead = int(np.argmax(pi))
    inc = step_scale * pi ** 2 * (v - v[lead])
    inc[lead] = 0.0
    inc[lead] = -inc.sum()
    return inc


@dataclass(frozen=True)
class DirectPolicy:
    pi: np.ndarray

    def __post_init__(self) -> None:
        pi = np.array(self.pi, dtype=float)
        if pi.min() < -SIMPLEX_TOL or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
            raise RuntimeError(f"mixture left the simplex: {pi}")
        object.__setattr__(self, "pi", pi)


def projection_free_update(pi: list[float], lead: int, chosen: int, reward: float, step_scale: float) -> list[float]:
    """One in-place update of the weights after controller ``chosen`` earned ``reward``."""
    M = len(pi)
    if reward:
        if chosen == lead:
            w = reward / pi[lead]
            for i in range(M):
                if i != lead:
                    pi[i] -= step_scale * pi[i] * pi[i] * w
        else:
            pi[chosen] += step_scale * pi[chosen] * reward
        pi[lead] = 1.0 - sum(pi[i] for i in range(M) if i != lead)
    return pi


@dataclass
class BanditRun:
    pi: np.ndarray
    chosen: np.ndarray
    arm: np.ndarray
    reward: np.ndarray
    instant_regret: np.ndarray
    cum_regret: np.ndarray
    final_pi: np.ndarray


def projection_free_pg(instance: BanditInstance, step_scale: float, T: int,
                       rng: np.random.Generator, initial_pi=None) -> BanditRun:
    """Direct-parameterization PG with importance-weighted reward feedback.

    Every non-leading controller m moves by step_scale * pi(m)^2 times the
    difference of its importance-weighted reward and the leader's; the
    leader (largest weight, lowest index on ties) takes up the remainder so
    the weights always sum to one.  Rewards are Bernoulli with the pulled
    arm's mean.
    """
    if not 0.0 < step_scale < 1.0:
        raise ValueError("step_scale must lie in (0, 1)")
    if T < 1:
        raise ValueError("T must be at least 1")
    M = instance.M
    pi = [1.0 / M] * M if initial_pi is None else [float(x) for x in initial_pi]
    DirectPolicy(np.array(pi))
    u = rng.random((T, 3))
    ctrl_cdf = np.cumsum(instance.controllers, axis=1).tolist()
    means = instance.arm_means.tolist()
    a = step_scale
    pis = np.empty((T, M))
    chosen = np.empty(T, dtype=np.int64)
    arms = np.empty(T, dtype=np.int64)
    rewards = np.empty(T)
    for k in range(T):
        pis[k] = pi
        lead = max(range(M), key=lambda i: (pi[i], -i))
        acc, m = 0.0, M - 1
        for i in range(M):
            acc += pi[i]
            if u[k, 0] < acc:
                m = i
                break
        cdf = ctrl_cdf[m]
        arm = next((j for j, c in enumerate(cdf) if u[k, 1] < c), len(cdf) - 1)
        r = 1.0 if u[k, 2] < means[arm] else 0.0
        chosen[k], arms[k], rewards[k] = m, arm, r
        if r:
            projection_free_update(pi, lead, m, r, a)
            if min(pi) < -SIMPLEX_TOL:
                raise RuntimeError(f"mixture left the simplex at round {k + 1}: {pi}")
    inst_regret = instance.v_star - pis @ instance.values / (1.0 - instance.gamma)
    return BanditRun(pi=pis, chosen=chosen, arm=arms, reward=rewards, instant_regret=inst_regret,
                     cum_regret=np.cumsum(inst_regret), final_pi=np.array(pi))
