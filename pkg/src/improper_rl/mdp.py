"""Finite MDPs under softmax mixtures of fixed base controllers.

Everything here is exact linear algebra: the mixture weights ``theta`` induce
a stationary policy ``pi(a|s) = sum_m softmax(theta)_m K_m(s, a)`` which is
evaluated by solving the Bellman system directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericalError

STOCHASTIC_TOL = 1e-12
DENSE_SOLVE_MAX_STATES = 2000
NEUMANN_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_distribution(p: np.ndarray, name: str, tol: float = STOCHASTIC_TOL) -> None:
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(p < 0):
        raise ValueError(f"{name} has negative entries")
    bad = np.abs(p.sum(axis=-1) - 1.0) > tol
    if np.any(bad):
        raise ValueError(f"{name} rows do not sum to 1 (worst error {np.abs(p.sum(axis=-1) - 1).max():.3g})")


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular discounted MDP.

    ``transition[s, a, s']`` is P(s'|s, a) and ``reward[s, a]`` the expected
    one-step reward.  ``rho`` is the evaluation distribution, ``mu`` the
    distribution the gradient is taken under (defaults to ``rho``).
    Rewards must lie in [0, 1] unless ``unnormalized`` is set.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    rho: np.ndarray
    mu: np.ndarray | None = None
    unnormalized: bool = False
    terminal_states: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("reward has non-finite entries")
        _check_distribution(P, "transition")
        if not self.unnormalized and (r.min() < 0 or r.max() > 1):
            raise ValueError("rewards must lie in [0, 1]; pass unnormalized=True to allow other ranges")
        # gamma = 0 is accepted: the one-step problem is well defined.
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        rho = _frozen(self.rho)
        mu = rho if self.mu is None else _frozen(self.mu)
        for name, d in (("rho", rho), ("mu", mu)):
            if d.shape != (S,):
                raise ValueError(f"{name} must have shape ({S},)")
            _check_distribution(d, name)
        for s in self.terminal_states:
            if not 0 <= s < S:
                raise ValueError(f"terminal state {s} out of range")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "terminal_states", tuple(int(s) for s in self.terminal_states))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def with_distributions(self, rho=None, mu=None) -> "FiniteMdp":
        """Copy of this MDP with different start distributions."""
        rho = self.rho if rho is None else rho
        mu = rho if mu is None else mu
        return FiniteMdp(self.transition, self.reward, self.gamma, rho, mu,
                         self.unnormalized, self.terminal_states)

    def with_gamma(self, gamma: float) -> "FiniteMdp":
        return FiniteMdp(self.transition, self.reward, gamma, self.rho, self.mu,
                         self.unnormalized, self.terminal_states)


@dataclass(frozen=True)
class ControllerSet:
    """M row-stochastic state-to-action matrices, stacked as shape (M, S, A)."""

    matrices: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        K = _frozen(self.matrices)
        if K.ndim != 3 or K.shape[0] < 1:
            raise ValueError(f"controllers must have shape (M, S, A), got {K.shape}")
        _check_distribution(K, "controller")
        names = tuple(self.names) or tuple(f"K{m + 1}" for m in range(K.shape[0]))
        if len(names) != K.shape[0]:
            raise ValueError("one name per controller")
        object.__setattr__(self, "matrices", K)
        object.__setattr__(self, "names", names)

    @property
    def M(self) -> int:
        return self.matrices.shape[0]

    def __len__(self) -> int:
        return self.M

    def check_compatible(self, mdp: FiniteMdp) -> None:
        if self.matrices.shape[1:] != (mdp.num_states, mdp.num_actions):
            raise ValueError(
                f"controllers have shape {self.matrices.shape[1:]}, MDP needs "
                f"{(mdp.num_states, mdp.num_actions)}"
            )


def softmax(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size < 1:
        raise ValueError("theta must be a non-empty vector")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta has non-finite entries")
    z = np.exp(theta - theta.max())
    return z / z.sum()


@dataclass(frozen=True)
class MixtureState:
    theta: np.ndarray
    pi: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        theta = _frozen(self.theta)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "pi", _frozen(softmax(theta)))


def induced_policy(mdp: FiniteMdp | None, controllers: ControllerSet, pi) -> np.ndarray:
    """S x A matrix with entries sum_m pi(m) K_m(s, a)."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (controllers.M,):
        raise ValueError(f"pi must have length {controllers.M}, got shape {pi.shape}")
    if mdp is not None:
        controllers.check_compatible(mdp)
    return np.tensordot(pi, controllers.matrices, axes=1)


@dataclass(frozen=True)
class PolicyEvaluation:
    V: np.ndarray
    V_mu: float
    V_rho: float
    Q: np.ndarray
    Qtilde: np.ndarray
    Atilde: np.ndarray
    d_mu: np.ndarray
    induced_policy: np.ndarray
    pi: np.ndarray


def _policy_matrices(mdp: FiniteMdp, policy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    return P_pi, r_pi


def _solve(mdp: FiniteMdp, P_pi: np.ndarray, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve (I - gamma P_pi) x = rhs, or its transpose."""
    S = P_pi.shape[0]
    G = mdp.gamma * (P_pi.T if transpose else P_pi)
    if S <= DENSE_SOLVE_MAX_STATES:
        try:
            x = np.linalg.solve(np.eye(S) - G, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Bellman system is singular") from exc
    else:
        x = rhs.copy()
        term = rhs.copy()
        for _ in range(1_000_000):
            term = G @ term
            x = x + term
            if np.abs(x - G @ x - rhs).max() <= NEUMANN_TOL:
                break
        else:
            raise NumericalError("Neumann series did not converge")
    if not np.all(np.isfinite(x)):
        raise NumericalError("Bellman solve produced non-finite values")
    return x


def policy_value(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """Per-state value of a stationary S x A policy."""
    P_pi, r_pi = _policy_matrices(mdp, policy)
    return _solve(mdp, P_pi, r_pi)


def visitation(mdp: FiniteMdp, policy: np.ndarray, start) -> np.ndarray:
    """Discounted state visitation (1-gamma) start^T (I - gamma P_pi)^{-1}."""
    P_pi, _ = _policy_matrices(mdp, policy)
    start = np.asarray(start, dtype=float)
    return (1.0 - mdp.gamma) * _solve(mdp, P_pi, start, transpose=True)


def evaluate_policy(mdp: FiniteMdp, controllers: ControllerSet, theta, mu=None) -> PolicyEvaluation:
    controllers.check_compatible(mdp)
    mu = mdp.mu if mu is None else np.asarray(mu, dtype=float)
    pi = softmax(theta)
    if pi.shape != (controllers.M,):
        raise ValueError(f"theta must have length {controllers.M}")
    policy = induced_policy(mdp, controllers, pi)
    P_pi, r_pi = _policy_matrices(mdp, policy)
    V = _solve(mdp, P_pi, r_pi)
    Q = mdp.reward + mdp.gamma * mdp.transition @ V
    Qtilde = np.einsum("msa,sa->sm", controllers.matrices, Q)
    Atilde = Qtilde - V[:, None]
    d_mu = (1.0 - mdp.gamma) * _solve(mdp, P_pi, mu, transpose=True)
    return PolicyEvaluation(
        V=V, V_mu=float(mu @ V), V_rho=float(mdp.rho @ V), Q=Q, Qtilde=Qtilde,
        Atilde=Atilde, d_mu=d_mu, induced_policy=policy, pi=pi,
    )


def state_visitation(mdp: FiniteMdp, controllers: ControllerSet, theta, mu=None) -> np.ndarray:
    controllers.check_compatible(mdp)
    mu = mdp.mu if mu is None else mu
    return visitation(mdp, induced_policy(mdp, controllers, softmax(theta)), mu)


def value_gradient_exact(mdp: FiniteMdp, controllers: ControllerSet, theta, mu=None) -> np.ndarray:
    """Gradient of V(mu) with respect to the mixture logits.

    Component m is ``1/(1-gamma) * sum_s d_mu(s) pi(m) Atilde(s, m)``.
    """
    ev = evaluate_policy(mdp, controllers, theta, mu)
    return ev.pi * (ev.d_mu @ ev.Atilde) / (1.0 - mdp.gamma)


def value_difference_rhs(mdp: FiniteMdp, controllers: ControllerSet, theta, theta_prime,
                         anchor_state: int) -> tuple[float, float]:
    """Right-hand sides of the two value-difference identities at one state.

    Both returned numbers equal V^{pi'}(s) - V^{pi}(s): the first expands
    along the visitation of pi' with pi's controller advantages, the second
    along the visitation of pi with pi''s controller Q-values.
    """
    S = mdp.num_states
    e_s = np.zeros(S)
    e_s[anchor_state] = 1.0
    ev = evaluate_policy(mdp, controllers, theta, e_s)
    ev_p = evaluate_policy(mdp, controllers, theta_prime, e_s)
    scale = 1.0 / (1.0 - mdp.gamma)
    first = scale * float(ev_p.d_mu @ (ev.Atilde @ ev_p.pi))
    second = scale * float(ev.d_mu @ (ev_p.Qtilde @ (ev_p.pi - ev.pi)))
    return first, second


def mixture_values(mdp: FiniteMdp, controllers: ControllerSet, pis: np.ndarray, dist=None) -> np.ndarray:
    """Value under ``dist`` for a batch of mixtures (rows of ``pis``)."""
    dist = mdp.rho if dist is None else np.asarray(dist, dtype=float)
    pis = np.atleast_2d(np.asarray(pis, dtype=float))
    P_m = np.einsum("msa,sat->mst", controllers.matrices, mdp.transition)
    r_m = np.einsum("msa,sa->ms", controllers.matrices, mdp.reward)
    S = mdp.num_states
    out = np.empty(len(pis))
    chunk = max(1, 2_000_000 // (S * S))
    for lo in range(0, len(pis), chunk):
        w = pis[lo:lo + chunk]
        P = np.einsum("bm,mst->bst", w, P_m)
        r = w @ r_m
        V = np.linalg.solve(np.eye(S)[None] - mdp.gamma * P, r[..., None])[..., 0]
        out[lo:lo + chunk] = V @ dist
    return out


def truncated_value(mdp: FiniteMdp, policy: np.ndarray, start, horizon: int) -> float:
    """Exact expected sum_{j=0}^{horizon} gamma^j r_j under a stationary policy."""
    P_pi, r_pi = _policy_matrices(mdp, policy)
    d = np.asarray(start, dtype=float)
    total = 0.0
    for j in range(horizon + 1):
        total += mdp.gamma ** j * float(d @ r_pi)
        d = d @ P_pi
    return total


def random_instance(num_states: int, num_actions: int, num_controllers: int, gamma: float,
                    rng: np.random.Generator, concentration: float = 1.0) -> tuple[FiniteMdp, ControllerSet]:
    """Random MDP with full-support start distributions and Dirichlet controllers."""
    S, A, M = num_states, num_actions, num_controllers
    P = rng.dirichlet(np.full(S, concentration), size=(S, A))
    r = rng.uniform(0.0, 1.0, size=(S, A))
    rho = rng.dirichlet(np.full(S, 2.0))
    K = rng.dirichlet(np.full(A, concentration), size=(M, S))
    return FiniteMdp(P, r, gamma, rho, rho), ControllerSet(K)


def load_json(path: str | Path) -> tuple[FiniteMdp, ControllerSet]:
    """Read an MDP and its controllers from a JSON file.

    Expected keys: num_states, num_actions, gamma, transition, reward, rho,
    mu (optional), controllers, and optionally unnormalized / terminal_states.
    """
    data = json.loads(Path(path).read_text())
    return from_dict(data)


def from_dict(data: dict) -> tuple[FiniteMdp, ControllerSet]:
    S, A = int(data["num_states"]), int(data["num_actions"])
    P = np.asarray(data["transition"], dtype=float)
    if P.shape != (S, A, S):
        raise ValueError(f"transition shape {P.shape} does not match num_states/num_actions")
    mdp = FiniteMdp(
        transition=P,
        reward=np.asarray(data["reward"], dtype=float),
        gamma=float(data["gamma"]),
        rho=np.asarray(data["rho"], dtype=float),
        mu=None if data.get("mu") is None else np.asarray(data["mu"], dtype=float),
        unnormalized=bool(data.get("unnormalized", False)),
        terminal_states=tuple(data.get("terminal_states", ())),
    )
    controllers = ControllerSet(np.asarray(data["controllers"], dtype=float),
                                tuple(data.get("controller_names", ())))
    controllers.check_compatible(mdp)
    return mdp, controllers


def to_dict(mdp: FiniteMdp, controllers: ControllerSet) -> dict:
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "rho": mdp.rho.tolist(),
        "mu": mdp.mu.tolist(),
        "unnormalized": mdp.unnormalized,
        "terminal_states": list(mdp.terminal_states),
        "controllers": controllers.matrices.tolist(),
        "controller_names": list(controllers.names),
    }


def bandit_as_mdp(arm_means: Sequence[float], controllers: np.ndarray, gamma: float) -> tuple[FiniteMdp, ControllerSet]:
    """Single-state MDP whose actions are bandit arms."""
    means = np.asarray(arm_means, dtype=float)
    A = means.size
    P = np.ones((1, A, 1))
    K = np.asarray(controllers, dtype=float).reshape(-1, 1, A)
    return FiniteMdp(P, means[None, :], gamma, np.ones(1)), ControllerSet(K)
