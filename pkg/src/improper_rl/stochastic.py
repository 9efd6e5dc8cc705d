"""Model-free softmax PG: rollout returns and one-point SPSA gradient estimates.

Environments are simulated in batches.  An environment implements the
``SimEnv`` protocol below on arrays of states, and a controller is any object
with ``act(states, rng) -> actions`` that also works on arrays.  A mixture is
executed by drawing a controller index per trajectory per step and then
asking that controller for the action.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import NumericalError
from .exact_pg import PgHistory, track_c
from .mdp import softmax


class SimEnv(Protocol):
    num_actions: int
    episodic: bool

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, states: np.ndarray, actions: np.ndarray,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]: ...

    def is_terminal(self, states: np.ndarray) -> np.ndarray: ...


class Controller(Protocol):
    name: str

    def act(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


def env_at_round(env, t: int):
    """Environments with time-varying parameters expose ``at_round``."""
    return env.at_round(t) if hasattr(env, "at_round") else env


class RngStream:
    """Splittable seeding: the same (seed, path) always yields the same generator."""

    def __init__(self, seed: int, *prefix: int | str):
        self.seed = int(seed) & (2**64 - 1)
        self.prefix = tuple(_path_key(p) for p in prefix)

    def child(self, *path: int | str) -> "RngStream":
        s = RngStream(self.seed)
        s.prefix = self.prefix + tuple(_path_key(p) for p in path)
        return s

    def generator(self, *path: int | str) -> np.random.Generator:
        key = self.prefix + tuple(_path_key(p) for p in path)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))


def _path_key(p: int | str) -> int:
    if isinstance(p, str):
        return zlib.crc32(p.encode("utf-8"))
    p = int(p)
    if p < 0:
        raise ValueError("path indices must be nonnegative")
    return p


@dataclass
class GradEstConfig:
    perturb_radius: float | None = None
    num_runs: int = 10
    num_rollouts: int = 10
    rollout_horizon: int = 30
    gamma: float = 0.9

    def __post_init__(self) -> None:
        if self.perturb_radius is None:
            self.perturb_radius = 1.0 / math.sqrt(self.num_runs)
        if not 0.0 < self.perturb_radius < 1.0:
            raise ValueError("perturb_radius must lie in (0, 1)")
        if self.num_runs < 1 or self.num_rollouts < 1 or self.rollout_horizon < 1:
            raise ValueError("num_runs, num_rollouts and rollout_horizon must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


def sample_unit_sphere(M: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if M < 1:
        raise ValueError("M must be positive")
    shape = (M,) if size is None else (size, M)
    while True:
        z = rng.standard_normal(shape)
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        if np.all(norms > 0):
            return z / norms


def sample_controllers(pis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One controller index per row of ``pis`` by inverse-CDF sampling."""
    cdf = np.cumsum(pis, axis=-1)
    u = rng.random(cdf.shape[0])[:, None]
    return np.minimum((u >= cdf).sum(axis=-1), cdf.shape[-1] - 1)


def mixture_actions(controllers: Sequence, states: np.ndarray, choice: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    actions = None
    for m, ctrl in enumerate(controllers):
        idx = np.flatnonzero(choice == m)
        if idx.size == 0:
            continue
        a = np.asarray(ctrl.act(states[idx], rng))
        if actions is None:
            actions = np.zeros((len(states),) + a.shape[1:], dtype=a.dtype)
        actions[idx] = a
    return actions


def rollout_returns(env, controllers: Sequence, pis, horizon: int, gamma: float,
                    rng: np.random.Generator, start_states: np.ndarray | None = None) -> np.ndarray:
    """Discounted returns sum_{j=0}^{horizon} gamma^j r_j, one per row of ``pis``.

    Trajectories that hit a terminal state stop accumulating reward.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    pis = np.atleast_2d(np.asarray(pis, dtype=float))
    n = pis.shape[0]
    states = env.reset(n, rng) if start_states is None else np.array(start_states)
    total = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    if env.episodic:
        alive &= ~env.is_terminal(states)
    disc = 1.0
    for j in range(horizon + 1):
        choice = sample_controllers(pis, rng)
        actions = mixture_actions(controllers, states, choice, rng)
        try:
            states, rewards = env.step(states, actions, rng)
        except Exception as exc:
            raise RuntimeError(f"environment step failed at rollout step {j}") from exc
        total += disc * np.where(alive, rewards, 0.0)
        if env.episodic:
            alive &= ~env.is_terminal(states)
            if not alive.any():
                break
        disc *= gamma
    return total


def rollout_return(env, controllers: Sequence, pi, horizon: int, gamma: float,
                   rng: np.random.Generator) -> float:
    return float(rollout_returns(env, controllers, np.asarray(pi, dtype=float)[None], horizon, gamma, rng)[0])


def grad_est_samples(env, controllers: Sequence, theta, config: GradEstConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-run terms mr(i) u_i M / radius; their mean is the gradient estimate."""
    theta = np.asarray(theta, dtype=float)
    M = theta.size
    R, L = config.num_runs, config.num_rollouts
    u = sample_unit_sphere(M, rng, size=R)
    pis = np.apply_along_axis(softmax, 1, theta[None, :] + config.perturb_radius * u)
    returns = rollout_returns(env, controllers, np.repeat(pis, L, axis=0),
                              config.rollout_horizon, config.gamma, rng)
    mr = returns.reshape(R, L).mean(axis=1)
    return mr[:, None] * u * (M / config.perturb_radius)


def grad_est(env, controllers: Sequence, theta, config: GradEstConfig,
             rng: np.random.Generator) -> np.ndarray:
    return grad_est_samples(env, controllers, theta, config, rng).mean(axis=0)


def gradient_rescale(g, target_norm: float = 10.0) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient has non-finite entries")
    norm = np.linalg.norm(g)
    return g if norm == 0 else g * (target_norm / norm)


@dataclass
class SpgeConfig:
    learning_rate: float = 1e-4
    rounds: int = 1000
    initial_theta: Sequence[float] | None = None
    rescale: bool = False
    validation_rollouts: int = 10
    advance_live: bool = True

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")


def spge_run(env, controllers: Sequence, config: SpgeConfig, gradest: GradEstConfig,
             stream: RngStream, pi_star=None,
             live_metrics: Callable[[np.ndarray], dict[str, float]] | None = None) -> PgHistory:
    """Softmax PG driven by SPSA gradient estimates.

    Round t uses the generator ``stream.generator(t)``.  Each round the live
    system takes one step under a controller drawn from pi_t, a gradient is
    estimated from fresh rollouts started from the environment's reset
    distribution, and an independent batch of validation rollouts at pi_t
    estimates the current value.
    """
    M = len(controllers)
    T = int(config.rounds)
    theta = np.ones(M) if config.initial_theta is None else np.array(config.initial_theta, dtype=float)
    if theta.shape != (M,):
        raise ValueError(f"initial_theta must have length {M}")
    thetas = np.empty((T, M))
    pis = np.empty((T, M))
    value_est = np.empty(T)
    grad_norm_est = np.empty(T)
    chosen = np.empty(T, dtype=np.int64)
    metrics: dict[str, list[float]] = {}
    live = None
    for k in range(T):
        t = k + 1
        rng = stream.generator(t)
        round_env = env_at_round(env, t)
        pi = softmax(theta)
        thetas[k] = theta
        pis[k] = pi
        if config.advance_live:
            if live is None:
                live = round_env.reset(1, rng)
            m = sample_controllers(pi[None], rng)
            chosen[k] = m[0]
            live, _ = round_env.step(live, mixture_actions(controllers, live, m, rng), rng)
            if round_env.episodic and round_env.is_terminal(live)[0]:
                live = round_env.reset(1, rng)
            if live_metrics is not None:
                for key, val in live_metrics(live).items():
                    metrics.setdefault(key, []).append(val)
        else:
            chosen[k] = -1
        g = grad_est(round_env, controllers, theta, gradest, rng)
        if config.rescale:
            g = gradient_rescale(g)
        grad_norm_est[k] = float(np.linalg.norm(g))
        if config.validation_rollouts > 0:
            vals = rollout_returns(round_env, controllers, np.repeat(pi[None], config.validation_rollouts, axis=0),
                                   gradest.rollout_horizon, gradest.gamma, rng)
            value_est[k] = float(vals.mean())
        else:
            value_est[k] = math.nan
        theta = theta + config.learning_rate * g
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"non-finite theta after round {t}: last estimate {g}")
    hist = PgHistory(t=np.arange(1, T + 1), theta=thetas, pi=pis, V_rho=value_est, V_mu=value_est,
                     grad_norm=grad_norm_est, final_theta=theta)
    hist.extras["value_estimate"] = value_est
    hist.extras["grad_norm_estimate"] = grad_norm_est
    hist.extras["chosen_m"] = chosen
    for key, vals in metrics.items():
        hist.extras[key] = np.asarray(vals, dtype=float)
    if pi_star is not None:
        hist.cbar_t, hist.cbar = track_c(pis, pi_star)
    return hist


@dataclass
class ConstantRewardEnv:
    """Single-state environment paying a fixed reward every step."""

    reward: float = 1.0
    num_actions: int = 1
    episodic: bool = False

    def reset(self, n, rng):
        return np.zeros(n, dtype=np.int64)

    def step(self, states, actions, rng):
        return states, np.full(len(states), float(self.reward))

    def is_terminal(self, states):
        return np.zeros(len(states), dtype=bool)


@dataclass
class ConstantController:
    action: int = 0
    name: str = field(default="const")

    def act(self, states, rng):
        return np.full(len(states), self.action, dtype=np.int64)
