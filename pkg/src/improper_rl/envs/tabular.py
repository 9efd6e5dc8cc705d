"""Tabular environments: samplers over a FiniteMdp plus two hand-built examples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..bandit import BanditInstance
from ..mdp import ControllerSet, FiniteMdp, evaluate_policy, policy_value, softmax

RIGHT, UP, NULL = 0, 1, 2
ADVANCE, RETREAT = 0, 1


def _sample_rows(cdf: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf.shape[0])[:, None]
    return np.minimum((u >= cdf).sum(axis=-1), cdf.shape[-1] - 1)


@dataclass
class TabularEnv:
    """Batch sampler for a FiniteMdp; resets draw from ``mdp.mu``.

    With ``bernoulli_rewards`` each reward is a coin flip with mean r(s, a)
    (requires rewards in [0, 1]); otherwise r(s, a) is paid exactly.
    """

    mdp: FiniteMdp
    bernoulli_rewards: bool = False
    episodic: bool = True
    _cdf: np.ndarray = field(init=False, repr=False)
    _terminal: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._cdf = np.cumsum(self.mdp.transition, axis=-1)
        self._terminal = np.zeros(self.mdp.num_states, dtype=bool)
        self._terminal[list(self.mdp.terminal_states)] = True
        self._start_cdf = np.cumsum(self.mdp.mu)[None, :]

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    def reset(self, n, rng):
        return _sample_rows(np.repeat(self._start_cdf, n, axis=0), rng)

    def step(self, states, actions, rng):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        nxt = _sample_rows(self._cdf[states, actions], rng)
        r = self.mdp.reward[states, actions]
        if self.bernoulli_rewards:
            r = (rng.random(len(states)) < r).astype(float)
        return nxt, r

    def is_terminal(self, states):
        return self._terminal[np.asarray(states, dtype=np.int64)]


@dataclass
class TabularController:
    matrix: np.ndarray
    name: str = "K"

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        self._cdf = np.cumsum(self.matrix, axis=-1)

    def act(self, states, rng):
        return _sample_rows(self._cdf[np.asarray(states, dtype=np.int64)], rng)


def tabular_controllers(controllers: ControllerSet) -> list[TabularController]:
    return [TabularController(K, name) for K, name in zip(controllers.matrices, controllers.names)]


def build_nonconcavity_example(r: float = 1.0, gamma: float = 0.9,
                               compensate_discount: bool = True) -> tuple[FiniteMdp, ControllerSet]:
    """Five-state MDP whose value is not concave in the mixture weights.

    From s1, "right" leads to s2 and "up" to the terminal s3.  From s2, "up"
    reaches the terminal s4 and is the only rewarded move; "right" reaches
    the terminal s5.  The rewarded move happens one step after the start, so
    by default its reward is r / gamma, making V(s1) exactly
    r * P[right at s1] * P[up at s2].
    """
    if r <= 0:
        raise ValueError("r must be positive")
    S, A = 5, 3
    P = np.zeros((S, A, S))
    P[:, :, :] = np.eye(S)[:, None, :]
    P[0, RIGHT] = np.eye(S)[1]
    P[0, UP] = np.eye(S)[2]
    P[1, RIGHT] = np.eye(S)[4]
    P[1, UP] = np.eye(S)[3]
    R = np.zeros((S, A))
    paid = r / gamma if compensate_discount and gamma > 0 else r
    R[1, UP] = paid
    rho = np.eye(S)[0]
    mdp = FiniteMdp(P, R, gamma, rho, rho, unnormalized=paid > 1.0, terminal_states=(2, 3, 4))
    done = [0.0, 0.0, 1.0]
    K1 = np.array([[0.25, 0.75, 0], [0.75, 0.25, 0], done, done, done])
    K2 = np.array([[0.75, 0.25, 0], [0.25, 0.75, 0], done, done, done])
    return mdp, ControllerSet(np.stack([K1, K2]), ("K1", "K2"))


def nonconcavity_values(r: float = 1.0, gamma: float = 0.9) -> tuple[float, float, float]:
    """V(s1) under K1, K2 and their even mixture."""
    mdp, ctrl = build_nonconcavity_example(r, gamma)
    out = []
    for pi in ([1.0, 0.0], [0.0, 1.0], [0.5, 0.5]):
        V = policy_value(mdp, np.tensordot(np.asarray(pi), ctrl.matrices, axes=1))
        out.append(float(V[0]))
    return tuple(out)


def nonconcavity_softmax_check(r: float, epsilon: float, gamma: float = 0.9,
                               tol: float = 1e-12) -> bool:
    """Midpoint test of concavity along the segment between two logit vectors."""
    if not 0.0 < epsilon <= 0.5:
        raise ValueError("epsilon must lie in (0, 0.5]")
    mdp, ctrl = build_nonconcavity_example(r, gamma)
    th1 = np.log([1.0 - epsilon, epsilon])
    th2 = np.log([epsilon, 1.0 - epsilon])
    mid = 0.5 * (th1 + th2)
    v1, v2, vm = (evaluate_policy(mdp, ctrl, th).V_rho for th in (th1, th2, mid))
    return v1 + v2 > 2.0 * vm + tol


def build_chain(gamma: float = 0.9, num_states: int = 10,
                special: tuple[int, int] = (5, 6), slip: float = 0.1) -> tuple[FiniteMdp, ControllerSet]:
    """Ten-state chain started at s1 with terminal s10.

    "advance" moves s_j to s_{j+1}, "retreat" moves s_j to s_{j-1} (s1
    stays put).  The only reward is 1 for advancing out of s9.  Controller
    i advances with probability 1 everywhere except at its special state
    (s5 for K1, s6 for K2), where it advances with probability ``slip``.
    """
    S = num_states
    P = np.zeros((S, 2, S))
    for j in range(S - 1):
        P[j, ADVANCE, j + 1] = 1.0
        P[j, RETREAT, max(j - 1, 0)] = 1.0
    P[S - 1, :, S - 1] = 1.0
    R = np.zeros((S, 2))
    R[S - 2, ADVANCE] = 1.0
    rho = np.eye(S)[0]
    mdp = FiniteMdp(P, R, gamma, rho, rho, terminal_states=(S - 1,))
    mats = []
    for sp in special:
        K = np.zeros((S, 2))
        K[:, ADVANCE] = 1.0
        K[sp - 1] = (slip, 1.0 - slip)
        mats.append(K)
    return mdp, ControllerSet(np.stack(mats), tuple(f"K{i + 1}" for i in range(len(special))))


def chain_closed_forms(gamma: float = 0.9) -> tuple[float, float]:
    """Closed-form chain values printed with the original experiment (reported, not asserted)."""
    pure = 0.1 * gamma ** 9 / (1 - 0.1 * 0.9 * gamma ** 2)
    mix = 0.55 ** 2 * gamma ** 9 / (1 - 2 * 0.55 * 0.45 * gamma ** 2)
    return pure, mix


def path_enumeration_value(mdp: FiniteMdp, policy: np.ndarray, start: int,
                           mass_tol: float = 1e-12) -> float:
    """Sum of gamma^length P[path] r over all trajectories from ``start``.

    Paths are grouped by (length, current state) so the number of groups
    stays linear in the length; the sum stops once the discounted mass of
    still-running paths falls below mass_tol.  Independent of the linear
    solver used by the evaluation routines.
    """
    S = mdp.num_states
    running = np.ones(S, dtype=bool)
    running[list(mdp.terminal_states)] = False
    mass = np.zeros(S)
    mass[start] = 1.0
    step_reward = (policy * mdp.reward).sum(axis=1)
    flow = np.einsum("sa,sat->st", policy, mdp.transition)
    total, disc = 0.0, 1.0
    while True:
        total += disc * float(mass @ step_reward)
        mass = (mass @ flow) * running
        disc *= mdp.gamma
        if disc * mass.sum() < mass_tol:
            return total


def bandit_env(instance: BanditInstance, bernoulli: bool = True) -> tuple[TabularEnv, list[TabularController]]:
    """Single-state environment whose actions are the arms."""
    A = instance.arm_means.size
    mdp = FiniteMdp(np.ones((1, A, 1)), instance.arm_means[None, :], instance.gamma, np.ones(1))
    env = TabularEnv(mdp, bernoulli_rewards=bernoulli, episodic=False)
    ctrls = [TabularController(k[None, :], f"K{m + 1}") for m, k in enumerate(instance.controllers)]
    return env, ctrls


def truncated_bandit_gradient(instance: BanditInstance, theta, horizon: int) -> np.ndarray:
    """Gradient of sum_{j=0}^{horizon} gamma^j E[r_j] for the bandit mixture."""
    pi = softmax(theta)
    v = instance.values
    weight = sum(instance.gamma ** j for j in range(horizon + 1))
    return weight * pi * (v - pi @ v)
