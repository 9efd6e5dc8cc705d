"""Softmax policy gradient over controller mixtures with exact gradients.

Besides the ascent loop this module carries numerical checkers for the
quantities the convergence analysis relies on: the smoothness constant,
the gradient-domination (Lojasiewicz) inequality, the one-step ascent
guarantee and the resulting O(1/t) suboptimality bound.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError, UnsupportedError
from .mdp import (
    ControllerSet,
    FiniteMdp,
    evaluate_policy,
    induced_policy,
    mixture_values,
    policy_value,
    softmax,
    value_gradient_exact,
    visitation,
)

BEST_IN_CLASS_MAX_M = 6
GRID_POINT_BUDGET = 20_000
GRID_MAX_RESOLUTION = 200
REFINE_MIN_STEP = 1e-9


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return gamma


def smoothness_constant(gamma: float) -> float:
    """(7 g^2 + 4 g + 5) / (2 (1 - g)^3), the conservative smoothness constant."""
    g = _check_gamma(gamma)
    return (7 * g * g + 4 * g + 5) / (2 * (1 - g) ** 3)


def default_learning_rate(gamma: float) -> float:
    g = _check_gamma(gamma)
    return (1 - g) ** 2 / (7 * g * g + 4 * g + 5)


@dataclass
class PgRunConfig:
    learning_rate: float | str = "auto"
    horizon: int = 1000
    initial_theta: Sequence[float] | None = None
    mu: Sequence[float] | None = None
    rho: Sequence[float] | None = None

    def __post_init__(self) -> None:
        if self.learning_rate != "auto":
            lr = float(self.learning_rate)
            if not (lr > 0 and math.isfinite(lr)):
                raise ValueError("learning_rate must be positive or 'auto'")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")

    def resolve_learning_rate(self, gamma: float) -> float:
        # "auto" is the largest step the ascent guarantee covers.
        if self.learning_rate == "auto":
            return 1.0 / smoothness_constant(gamma)
        return float(self.learning_rate)


@dataclass
class PgHistory:
    """Per-round trace of a policy-gradient run (index 0 is round t=1)."""

    t: np.ndarray
    theta: np.ndarray
    pi: np.ndarray
    V_rho: np.ndarray
    V_mu: np.ndarray
    grad_norm: np.ndarray
    delta: np.ndarray | None = None
    cbar_t: np.ndarray | None = None
    cbar: float | None = None
    final_theta: np.ndarray | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)


def track_c(pi_history, pi_star, support_tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Running infimum of the smallest mixture weight on the support of pi_star."""
    pis = np.atleast_2d(np.asarray(pi_history, dtype=float))
    pi_star = np.asarray(pi_star, dtype=float)
    if pis.shape[0] == 0:
        raise ValueError("empty history")
    support = pi_star > support_tol
    if not support.any():
        raise ValueError("pi_star has empty support")
    running = np.minimum.accumulate(pis[:, support].min(axis=1))
    return running, float(running[-1])


def softmax_pg_run(mdp: FiniteMdp, controllers: ControllerSet, config: PgRunConfig,
                   v_star: float | None = None, pi_star=None,
                   sample_rng: np.random.Generator | None = None) -> PgHistory:
    """Run T rounds of exact-gradient ascent on V(mu) from config.initial_theta.

    ``v_star`` enables the suboptimality column, ``pi_star`` the c-bar
    tracking.  When ``sample_rng`` is given, the controller and action drawn
    at state s_0 ~ rho each round are logged; they do not affect the update.
    """
    controllers.check_compatible(mdp)
    M = controllers.M
    mu = mdp.mu if config.mu is None else np.asarray(config.mu, dtype=float)
    rho = mdp.rho if config.rho is None else np.asarray(config.rho, dtype=float)
    eta = config.resolve_learning_rate(mdp.gamma)
    T = int(config.horizon)
    theta = np.ones(M) if config.initial_theta is None else np.array(config.initial_theta, dtype=float)
    if theta.shape != (M,):
        raise ValueError(f"initial_theta must have length {M}")

    thetas = np.empty((T, M))
    pis = np.empty((T, M))
    v_rho = np.empty(T)
    v_mu = np.empty(T)
    gnorm = np.empty(T)
    chosen = np.full(T, -1, dtype=np.int64)
    actions = np.full(T, -1, dtype=np.int64)
    scale = 1.0 / (1.0 - mdp.gamma)
    for k in range(T):
        ev = evaluate_policy(mdp, controllers, theta, mu)
        grad = scale * ev.pi * (ev.d_mu @ ev.Atilde)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient at round {k + 1}")
        thetas[k] = theta
        pis[k] = ev.pi
        v_mu[k] = ev.V_mu
        v_rho[k] = float(rho @ ev.V)
        gnorm[k] = float(np.linalg.norm(grad))
        if sample_rng is not None:
            s0 = sample_rng.choice(mdp.num_states, p=rho)
            chosen[k] = sample_rng.choice(M, p=ev.pi)
            actions[k] = sample_rng.choice(mdp.num_actions, p=controllers.matrices[chosen[k], s0])
        theta = theta + eta * grad
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"non-finite theta after round {k + 1}")

    hist = PgHistory(t=np.arange(1, T + 1), theta=thetas, pi=pis, V_rho=v_rho, V_mu=v_mu,
                     grad_norm=gnorm, final_theta=theta)
    if v_star is not None:
        hist.delta = v_star - v_rho
    if pi_star is not None:
        hist.cbar_t, hist.cbar = track_c(pis, pi_star)
    if sample_rng is not None:
        hist.extras["chosen_m"] = chosen
        hist.extras["action"] = actions
    hist.extras["learning_rate"] = np.array([eta])
    return hist


def _simplex_grid(M: int, n: int) -> np.ndarray:
    """All points of the simplex with coordinates in {0, 1/n, ..., 1}."""
    pts = []
    for bars in itertools.combinations(range(n + M - 1), M - 1):
        edges = (-1,) + bars + (n + M - 1,)
        pts.append([edges[i + 1] - edges[i] - 1 for i in range(M)])
    return np.asarray(pts, dtype=float) / n


def _grid_resolution(M: int, budget: int) -> int:
    n = GRID_MAX_RESOLUTION
    while n > 1 and math.comb(n + M - 1, M - 1) > budget:
        n -= 1
    return n


def _refine(mdp, controllers, dist, start: np.ndarray, start_value: float, step: float):
    """Greedy pairwise mass transfer with step halving."""
    M = controllers.M
    pairs = [(i, j) for i in range(M) for j in range(M) if i != j]
    x, best = start.copy(), start_value
    while step >= REFINE_MIN_STEP:
        cands = []
        for i, j in pairs:
            h = min(step, x[j])
            if h <= 0:
                continue
            y = x.copy()
            y[i] += h
            y[j] -= h
            cands.append(y)
        if not cands:
            break
        cands = np.asarray(cands)
        vals = mixture_values(mdp, controllers, cands, dist)
        k = int(np.argmax(vals))
        if vals[k] > best + 1e-15:
            x, best = cands[k], float(vals[k])
        else:
            step /= 2
    return x, best


def best_in_class(mdp: FiniteMdp, controllers: ControllerSet, dist=None,
                  point_budget: int = GRID_POINT_BUDGET, num_starts: int = 3) -> tuple[np.ndarray, float]:
    """Brute-force maximizer of V(dist) over the mixture simplex.

    A uniform grid (resolution 1/200, coarsened to fit ``point_budget``) is
    searched exhaustively, then the best few grid points are polished by
    moving mass between pairs of coordinates.  Independent of any gradient
    code, so it can serve as an oracle for the ascent runs.
    """
    controllers.check_compatible(mdp)
    M = controllers.M
    if M > BEST_IN_CLASS_MAX_M:
        raise UnsupportedError(f"grid oracle supports M <= {BEST_IN_CLASS_MAX_M}, got {M}")
    dist = mdp.rho if dist is None else np.asarray(dist, dtype=float)
    if M == 1:
        return np.ones(1), float(mixture_values(mdp, controllers, np.ones((1, 1)), dist)[0])
    n = _grid_resolution(M, point_budget)
    grid = _simplex_grid(M, n)
    vals = mixture_values(mdp, controllers, grid, dist)
    order = np.argsort(-vals, kind="stable")[:num_starts]
    best_x, best_v = grid[order[0]], float(vals[order[0]])
    for k in order:
        x, v = _refine(mdp, controllers, dist, grid[k], float(vals[k]), 1.0 / n)
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


def _value_at(mdp, controllers, theta, dist) -> float:
    return float(dist @ policy_value(mdp, induced_policy(mdp, controllers, softmax(theta))))


def smoothness_witness(mdp: FiniteMdp, controllers: ControllerSet, theta, theta_prime,
                       beta: float | None = None, mu=None) -> float:
    """Taylor remainder minus (beta/2)|theta' - theta|^2; nonpositive when smooth."""
    mu = mdp.mu if mu is None else np.asarray(mu, dtype=float)
    beta = smoothness_constant(mdp.gamma) if beta is None else float(beta)
    theta = np.asarray(theta, dtype=float)
    step = np.asarray(theta_prime, dtype=float) - theta
    v0 = _value_at(mdp, controllers, theta, mu)
    v1 = _value_at(mdp, controllers, theta_prime, mu)
    g = value_gradient_exact(mdp, controllers, theta, mu)
    return abs(v1 - v0 - float(g @ step)) - 0.5 * beta * float(step @ step)


def ascent_check(mdp: FiniteMdp, controllers: ControllerSet, theta, eta: float,
                 beta: float | None = None, mu=None, tol: float = 1e-10) -> bool:
    """Does one gradient step of size eta improve V(mu) as smoothness promises?

    The promised gain is eta (1 - beta eta / 2) |g|^2, which equals
    |g|^2 / (2 beta) at eta = 1/beta.
    """
    mu = mdp.mu if mu is None else np.asarray(mu, dtype=float)
    beta = smoothness_constant(mdp.gamma) if beta is None else float(beta)
    if eta <= 0 or eta > (1.0 + 1e-12) / beta:
        raise ValueError(f"eta must lie in (0, 1/beta] = (0, {1 / beta:.6g}], got {eta}")
    theta = np.asarray(theta, dtype=float)
    g = value_gradient_exact(mdp, controllers, theta, mu)
    gain = _value_at(mdp, controllers, theta + eta * g, mu) - _value_at(mdp, controllers, theta, mu)
    promised = eta * (1.0 - 0.5 * beta * eta) * float(g @ g)
    return gain >= promised - tol


@dataclass(frozen=True)
class LojasiewiczGap:
    lhs: float
    rhs: float
    assumption_holds: bool
    assumption_margin: float

    @property
    def satisfied(self) -> bool:
        return self.lhs >= self.rhs - 1e-10


def mixture_evaluation(mdp: FiniteMdp, controllers: ControllerSet, pi, start) -> tuple[np.ndarray, np.ndarray]:
    """Per-state value and visitation of an explicit mixture (zeros allowed)."""
    policy = induced_policy(mdp, controllers, np.asarray(pi, dtype=float))
    return policy_value(mdp, policy), visitation(mdp, policy, start)


def lojasiewicz_gap(mdp: FiniteMdp, controllers: ControllerSet, theta, pi_star,
                    mu=None, rho=None, assumption_tol: float = 1e-12) -> LojasiewiczGap:
    """Both sides of the gradient-domination inequality at theta.

    The mismatch coefficient compares the optimal mixture's visitation from
    rho with the current visitation from mu; the two coincide with the
    usual statement when rho == mu.  ``assumption_holds`` reports whether
    every state has a nonnegative pi_star-averaged controller advantage;
    when it does not the inequality is not guaranteed.
    """
    mu = mdp.mu if mu is None else np.asarray(mu, dtype=float)
    rho = mdp.rho if rho is None else np.asarray(rho, dtype=float)
    pi_star = np.asarray(pi_star, dtype=float)
    M = controllers.M
    ev = evaluate_policy(mdp, controllers, theta, mu)
    grad = ev.pi * (ev.d_mu @ ev.Atilde) / (1.0 - mdp.gamma)
    margin = float((ev.Atilde @ pi_star).min())
    v_star, d_star = mixture_evaluation(mdp, controllers, pi_star, rho)
    gap = float(rho @ v_star) - float(rho @ ev.V)
    support = pi_star > 1e-12
    ratio = np.max(d_star / ev.d_mu)
    rhs = ev.pi[support].min() / math.sqrt(M) / ratio * gap
    return LojasiewiczGap(lhs=float(np.linalg.norm(grad)), rhs=float(rhs),
                          assumption_holds=margin >= -assumption_tol, assumption_margin=margin)


def instance_norms(mdp: FiniteMdp, controllers: ControllerSet, pi_star, mu=None) -> tuple[float, float]:
    """(max_s d_mu^{pi*}(s)/mu(s), max_s 1/mu(s)) for the convergence bound."""
    mu = mdp.mu if mu is None else np.asarray(mu, dtype=float)
    if np.any(mu <= 0):
        return math.inf, math.inf
    _, d_star = mixture_evaluation(mdp, controllers, pi_star, mu)
    return float(np.max(d_star / mu)), float(np.max(1.0 / mu))


def convergence_rate_bound(M: int, gamma: float, t, c_measured: float, mdp_norms: tuple[float, float]):
    """O(1/t) suboptimality bound for exact softmax PG at step 1/beta."""
    if not c_measured > 0:
        raise ValueError(f"c must be positive, got {c_measured}")
    g = _check_gamma(gamma)
    mismatch, inv_mu = mdp_norms
    const = M * (7 * g * g + 4 * g + 5) / (c_measured ** 2 * (1 - g) ** 3) * mismatch ** 2 * inv_mu
    return const / np.asarray(t, dtype=float)
