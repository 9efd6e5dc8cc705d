"""Linearized cart-pole: LQR design, random switching between gains, and a noisy simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError

GRAVITY = 9.8
POLE_MASS = 0.1
POLE_LENGTH = 1.0
CART_MASS = 1.0


@dataclass(frozen=True)
class PendulumModel:
    A_c: np.ndarray
    b_c: np.ndarray
    A_d: np.ndarray
    b_d: np.ndarray
    dt: float


def build_pendulum(g: float = GRAVITY, m_p: float = POLE_MASS, l: float = POLE_LENGTH,
                   m_k: float = CART_MASS, dt: float = 0.02) -> PendulumModel:
    """Continuous-time linearization around upright, then forward-Euler discretization.

    State is (cart position, cart velocity, pole angle, pole angular velocity).
    """
    if min(g, m_p, l, m_k) <= 0:
        raise ValueError("physical parameters must be positive")
    if not 0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1]")
    denom = l * (4.0 / 3.0 - m_p / (m_p + m_k))
    if denom <= 0:
        raise ValueError("nonphysical parameters")
    a = g / denom
    A_c = np.zeros((4, 4))
    A_c[0, 1] = 1.0
    A_c[1, 2] = a
    A_c[2, 3] = 1.0
    A_c[3, 2] = a
    b_c = np.array([0.0, 1.0 / (m_p + m_k), 0.0, 1.0 / denom])
    return PendulumModel(A_c, b_c, np.eye(4) + dt * A_c, dt * b_c, dt)


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def dare_solve(A: np.ndarray, b: np.ndarray, Q: np.ndarray, R: float,
               tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """LQR gain K for u = -K^T x from fixed-point Riccati iteration.

    The update is written in the equivalent form Q + R k k^T + (A - b k^T)^T
    P (A - b k^T), which keeps P symmetric positive semidefinite under
    round-off on poorly conditioned systems.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    Q = np.asarray(Q, dtype=float)
    R = float(R)
    if R <= 0:
        raise ValueError("R must be positive")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    P = Q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            Pb = P @ b
            k = (Pb @ A) / (R + b @ Pb)
            F = A - np.outer(b, k)
            P_next = Q + R * np.outer(k, k) + F.T @ P @ F
            P_next = 0.5 * (P_next + P_next.T)
            if not np.all(np.isfinite(P_next)):
                raise NumericalError("Riccati iteration diverged")
            change = np.abs(P_next - P).max()
            P = P_next
            if change <= tol * max(1.0, np.abs(P).max()):
                break
        else:
            raise NumericalError("Riccati iteration did not converge")
    Pb = P @ b
    K = (Pb @ A) / (R + b @ Pb)
    rho = spectral_radius(A - np.outer(b, K))
    if rho >= 1.0:
        raise RuntimeError(f"LQR closed loop is unstable (spectral radius {rho})")
    return K


def closed_loop(model: PendulumModel, gains) -> list[np.ndarray]:
    return [model.A_d - np.outer(model.b_d, k) for k in np.atleast_2d(gains)]


@dataclass
class EplsResult:
    lyapunov_estimate: float
    final_log_norm: float
    switches: np.ndarray


def epls_simulate(mats, p, x0, T: int, rng: np.random.Generator) -> EplsResult:
    """x(t+1) = A(r_t) x(t) with r_t iid ~ p; returns (1/T) log(|x(T)|/|x(0)|).

    The state is renormalized every step and log norms are accumulated, so
    neither overflow nor underflow can occur for finite matrices.
    """
    mats = np.asarray(mats, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape != (len(mats),) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
        raise ValueError("p must be a distribution over the matrices")
    x = np.asarray(x0, dtype=float)
    n0 = np.linalg.norm(x)
    if n0 == 0:
        raise ValueError("x0 must be nonzero")
    x = x / n0
    switches = rng.choice(len(mats), size=T, p=p)
    log_norm = 0.0
    for i in switches:
        x = mats[i] @ x
        nx = np.linalg.norm(x)
        if nx == 0:
            return EplsResult(-math.inf, -math.inf, switches)
        if not math.isfinite(nx):
            raise NumericalError("state overflowed")
        log_norm += math.log(nx)
        x = x / nx
    return EplsResult(log_norm / T, log_norm, switches)


def epls_upper_bound(mats, p) -> float:
    """sum_i p_i log |A(i)|_2."""
    return float(sum(pi * math.log(np.linalg.norm(A, 2)) for pi, A in zip(p, mats) if pi > 0))


@dataclass
class CartpoleEnv:
    """Noisy linear cart-pole with linear feedback; reward 1 per step upright.

    Resets draw each state coordinate uniformly from [-init_scale, init_scale].
    A trajectory ends when the pole angle exceeds ``fall_angle`` radians, the
    cart leaves [-track_limit, track_limit], or ``episode_len`` steps pass.
    The step counter is carried as a fifth state column.
    """

    model: PendulumModel
    noise_std: float = 0.01
    fall_angle: float = math.radians(12.0)
    track_limit: float = 2.4
    episode_len: int = 500
    init_scale: float = 0.05
    num_actions: int = 1
    episodic: bool = True

    def __post_init__(self) -> None:
        if min(self.fall_angle, self.track_limit, self.episode_len) <= 0 or self.noise_std < 0:
            raise ValueError("thresholds must be positive")

    def reset(self, n, rng):
        x = rng.uniform(-self.init_scale, self.init_scale, size=(n, 4))
        return np.hstack([x, np.zeros((n, 1))])

    def fallen(self, states) -> np.ndarray:
        return (np.abs(states[:, 2]) > self.fall_angle) | (np.abs(states[:, 0]) > self.track_limit)

    def step(self, states, actions, rng):
        x = states[:, :4]
        u = np.asarray(actions, dtype=float).reshape(-1)
        reward = (~self.fallen(states)).astype(float)
        nxt = x @ self.model.A_d.T + np.outer(u, self.model.b_d)
        if self.noise_std > 0:
            nxt = nxt + self.noise_std * rng.standard_normal(nxt.shape)
        return np.hstack([nxt, states[:, 4:] + 1]), reward

    def is_terminal(self, states):
        return self.fallen(states) | (states[:, 4] >= self.episode_len)


@dataclass
class LinearFeedback:
    gain: np.ndarray
    name: str

    def act(self, states, rng):
        return -(states[:, :4] @ np.asarray(self.gain, dtype=float))


def uptime(env: CartpoleEnv, controllers, pi, n: int, rng: np.random.Generator) -> np.ndarray:
    """Steps survived (up to episode_len) in n episodes of the mixture pi."""
    from ..stochastic import mixture_actions, sample_controllers

    pi = np.asarray(pi, dtype=float)
    states = env.reset(n, rng)
    alive = np.ones(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    for _ in range(env.episode_len):
        choice = sample_controllers(np.repeat(pi[None], n, axis=0), rng)
        actions = mixture_actions(controllers, states, choice, rng)
        states, _ = env.step(states, actions, rng)
        fell = env.fallen(states)
        alive &= ~fell
        steps += alive
        if not alive.any():
            break
    return steps
