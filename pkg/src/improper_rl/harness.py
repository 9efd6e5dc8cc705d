"""Experiment orchestration: trials, aggregation, CSV output and pass/fail checks.

Each experiment returns a ``RunRecord`` holding raw per-(trial, round) rows,
per-round aggregates across trials, a summary of reported quantities and a
dict of named boolean checks.  Trials draw randomness only from generators
derived from (seed, experiment, trial, round), so results do not depend on
how many worker processes are used.
"""
from __future__ import annotations

import functools
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import bandit as bd
from . import exact_pg as ep
from . import mdp as md
from . import stochastic as st
from .envs import pendulum as pe
from .envs import queues as qu
from .envs import tabular as tb

log = logging.getLogger(__name__)

EXPERIMENTS = ("nonconcavity", "chain", "bandit-exact", "bandit-noisy", "queue2",
               "queue2-nonstationary", "pathgraph", "cartpole", "theory-checks")


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    trials: int = 20
    rounds: int | None = None
    algorithm: str | None = None
    workers: int = 1
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.rounds is not None and self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def param(self, key: str, default):
        return self.params.get(key, default)

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class RunRecord:
    experiment: str
    columns: list[str]
    rows: np.ndarray
    agg_columns: list[str] = field(default_factory=list)
    agg_rows: np.ndarray | None = None
    summary: dict[str, Any] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)
    single_trial: bool = False

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# ---------------------------------------------------------------- plumbing

def _map_trials(fn: Callable, args: list, workers: int) -> list:
    """Apply fn to each argument tuple; failures come back as exceptions."""
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_guarded, fn, a) for a in args]
            return [f.result() for f in futures]
    return [_guarded(fn, a) for a in args]


def _guarded(fn, a):
    try:
        return fn(*a)
    except Exception as exc:  # recorded per trial, the run continues
        return exc


def _collect(results: list, record_errors: dict[int, str]) -> list[tuple[int, Any]]:
    ok = []
    for i, res in enumerate(results):
        if isinstance(res, Exception):
            record_errors[i] = f"{type(res).__name__}: {res}"
            log.warning("trial %d failed: %s", i, res)
        else:
            ok.append((i, res))
    if not ok:
        raise RuntimeError(f"all trials failed; first error: {next(iter(record_errors.values()))}")
    return ok


def aggregate(columns: list[str], rows: np.ndarray) -> tuple[list[str], np.ndarray, bool]:
    """Per-round mean and sample std (n-1) of every value column across trials.

    Rows must contain "trial" and "t" columns.  Returns the aggregate
    header, the table, and a flag that is True when only one trial was
    available (std then reported as 0).
    """
    rows = np.asarray(rows, dtype=float)
    value_cols = [c for c in columns if c not in ("trial", "t")]
    header = ["t", "n_trials"] + [f"{c}_{s}" for c in value_cols for s in ("mean", "std")]
    if rows.size == 0:
        return header, np.empty((0, len(header))), False
    ti, tt = columns.index("trial"), columns.index("t")
    idx = [columns.index(c) for c in value_cols]
    rounds = np.unique(rows[:, tt])
    out = np.empty((len(rounds), len(header)))
    single = False
    for r, t in enumerate(rounds):
        block = rows[rows[:, tt] == t]
        block = block[np.argsort(block[:, ti], kind="stable")]
        vals = block[:, idx]
        n = len(block)
        mean = vals.sum(axis=0) / n
        if n > 1:
            std = np.sqrt(((vals - mean) ** 2).sum(axis=0) / (n - 1))
        else:
            std = np.zeros_like(mean)
            single = True
        out[r, 0], out[r, 1] = t, n
        out[r, 2::2], out[r, 3::2] = mean, std
    if single:
        warnings.warn("single trial: standard deviations reported as 0", RuntimeWarning, stacklevel=2)
    if "cbar_t" in columns:
        header = header + ["cbar_t_inf"]
        ci = columns.index("cbar_t")
        inf = np.array([np.nanmin(rows[rows[:, tt] == t, ci]) if np.any(~np.isnan(rows[rows[:, tt] == t, ci]))
                        else np.nan for t in rounds])
        out = np.column_stack([out, inf])
    return header, out, single


def _format(v: float, integer: bool) -> str:
    if integer and math.isfinite(v):
        return str(int(v))
    return "%.17g" % v


def write_table(path: Path, columns: list[str], rows: np.ndarray, int_columns=("trial", "t", "n_trials")) -> None:
    ints = [c in int_columns or c == "chosen_m" for c in columns]
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(columns) + "\n")
            for row in np.asarray(rows, dtype=float).reshape(-1, len(columns)):
                fh.write(",".join(_format(v, i) for v, i in zip(row, ints)) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_csv(record: RunRecord, out_dir: str | Path) -> list[Path]:
    """Write <experiment>.csv, <experiment>_agg.csv and <experiment>_summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = out / f"{record.experiment}.csv"
    agg = out / f"{record.experiment}_agg.csv"
    summ = out / f"{record.experiment}_summary.json"
    write_table(raw, record.columns, record.rows)
    agg_rows = record.agg_rows if record.agg_rows is not None else np.empty((0, len(record.agg_columns)))
    write_table(agg, record.agg_columns, agg_rows)
    payload = {"summary": _jsonable(record.summary), "checks": record.checks,
               "errors": {str(k): v for k, v in record.errors.items()},
               "single_trial_warning": record.single_trial}
    summ.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [raw, agg, summ]


def read_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]]) if len(lines) > 1 else np.empty((0, len(header)))
    return header, rows


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _record(name: str, columns: list[str], trial_rows: list[tuple[int, np.ndarray]], summary, checks, errors) -> RunRecord:
    blocks = [np.column_stack([np.full(len(r), i), r]) for i, r in trial_rows]
    rows = np.vstack(blocks) if blocks else np.empty((0, len(columns)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        agg_cols, agg_rows, single = aggregate(columns, rows)
    checks = {k: bool(v) for k, v in checks.items()}
    return RunRecord(name, columns, rows, agg_cols, agg_rows, summary, checks, errors, single)


def history_columns(M: int, names: tuple[str, ...] = (), extra: tuple[str, ...] = ()) -> list[str]:
    cols = ["trial", "t"] + [f"theta_{m + 1}" for m in range(M)] + [f"pi_{m + 1}" for m in range(M)]
    if names and any(n != f"K{m + 1}" for m, n in enumerate(names)):
        cols += [f"p_{n}" for n in names]
    cols += ["V_rho", "delta", "grad_norm", "cbar_t"]
    return cols + list(extra)


def history_rows(h: ep.PgHistory, named: bool, extra: tuple[str, ...] = (), pad_to: int | None = None) -> np.ndarray:
    T = len(h)
    nan = np.full(T, np.nan)
    theta, pi = h.theta, h.pi
    if pad_to is not None and pad_to > theta.shape[1]:
        fill = np.full((T, pad_to - theta.shape[1]), np.nan)
        theta, pi = np.hstack([theta, fill]), np.hstack([pi, fill])
    parts = [h.t[:, None], theta, pi]
    if named:
        parts.append(h.pi)
    parts += [h.V_rho[:, None], (h.delta if h.delta is not None else nan)[:, None],
              h.grad_norm[:, None], (h.cbar_t if h.cbar_t is not None else nan)[:, None]]
    parts += [np.asarray(h.extras.get(k, nan), dtype=float)[:, None] for k in extra]
    return np.hstack(parts)


# ---------------------------------------------------------------- SPGE trials

SPGE_EXTRA = ("value_estimate", "grad_norm_estimate")


def _spge_config(cfg: ExperimentConfig, default_rounds: int, **kw) -> tuple[st.SpgeConfig, st.GradEstConfig]:
    p = cfg.params
    spge = st.SpgeConfig(
        learning_rate=float(p.get("learning_rate", 1e-4)),
        rounds=int(cfg.rounds or default_rounds),
        initial_theta=p.get("initial_theta"),
        rescale=bool(p.get("rescale", kw.get("rescale", False))),
        validation_rollouts=int(p.get("validation_rollouts", 10)),
    )
    ge = st.GradEstConfig(
        perturb_radius=p.get("perturb_radius"),
        num_runs=int(p.get("num_runs", 10)),
        num_rollouts=int(p.get("num_rollouts", 10)),
        rollout_horizon=int(p.get("rollout_horizon", 30)),
        gamma=float(p.get("gamma", 0.9)),
    )
    return spge, ge


def _live_state_metrics(names, state):
    return {k: float(state[0][i]) for i, k in enumerate(names)}


def _spge_trial(env, ctrls, spge, ge, seed, name, trial, pi_star, metric_names):
    stream = st.RngStream(seed, name, trial)
    metrics = functools.partial(_live_state_metrics, metric_names) if metric_names else None
    return st.spge_run(env, ctrls, spge, ge, stream, pi_star=pi_star, live_metrics=metrics)


def _run_spge(cfg: ExperimentConfig, env, ctrls, default_rounds: int, pi_star=None,
              metric_names: tuple[str, ...] = (), **kw):
    spge, ge = _spge_config(cfg, default_rounds, **kw)
    names = tuple(c.name for c in ctrls)
    args = [(env, ctrls, spge, ge, cfg.seed, cfg.experiment, i, pi_star, metric_names) for i in range(cfg.trials)]
    errors: dict[int, str] = {}
    hists = _collect(_map_trials(_spge_trial, args, cfg.workers), errors)
    extra = SPGE_EXTRA + tuple(metric_names)
    cols = history_columns(len(ctrls), names, extra)
    named = any(c.startswith("p_") for c in cols)
    rows = [(i, history_rows(h, named, extra)) for i, h in hists]
    return cols, rows, hists, errors


def _final_pi(hists) -> np.ndarray:
    return np.mean([h.pi[-1] for _, h in hists], axis=0)


# ---------------------------------------------------------------- experiments

def run_nonconcavity(cfg: ExperimentConfig) -> RunRecord:
    r = float(cfg.param("r", 1.0))
    gamma = float(cfg.param("gamma", 0.9))
    eps = float(cfg.param("epsilon", 0.1))
    v1, v2, vmid = tb.nonconcavity_values(r, gamma)
    expected = (r / 16, 9 * r / 16, r / 4)
    errs = [abs(a - b) for a, b in zip((v1, v2, vmid), expected)]
    mdp, ctrl = tb.build_nonconcavity_example(r, gamma)
    pi_star, v_star = ep.best_in_class(mdp, ctrl)
    h = ep.softmax_pg_run(mdp, ctrl, ep.PgRunConfig(horizon=int(cfg.rounds or 200)), v_star=v_star, pi_star=pi_star)
    cols = history_columns(2)
    summary = {"V_K1": v1, "V_K2": v2, "V_mid": vmid, "expected": expected, "max_abs_error": max(errs),
               "midpoint_average": 0.5 * (v1 + v2), "non_concave": 0.5 * (v1 + v2) > vmid,
               "softmax_epsilon": eps, "softmax_non_concave": tb.nonconcavity_softmax_check(r, eps, gamma),
               "pi_star": pi_star, "V_star": v_star}
    checks = {"values_match": max(errs) <= 1e-10, "non_concave": bool(summary["non_concave"]),
              "softmax_non_concave": bool(summary["softmax_non_concave"])}
    return _record(cfg.experiment, cols, [(0, history_rows(h, False))], summary, checks, {})


def run_chain(cfg: ExperimentConfig) -> RunRecord:
    gamma = float(cfg.param("gamma", 0.9))
    mdp, ctrl = tb.build_chain(gamma)
    values = {}
    for label, pi in (("K1", [1.0, 0.0]), ("K2", [0.0, 1.0]), ("mix", [0.5, 0.5])):
        pol = md.induced_policy(mdp, ctrl, np.asarray(pi))
        values[label] = (float(md.policy_value(mdp, pol)[0]), tb.path_enumeration_value(mdp, pol, 0))
    pi_star, v_star = ep.best_in_class(mdp, ctrl)
    pure_cf, mix_cf = tb.chain_closed_forms(gamma)
    summary = {"V_K1": values["K1"][0], "V_K2": values["K2"][0], "V_mix": values["mix"][0],
               "enumeration": {k: v[1] for k, v in values.items()},
               "printed_closed_form_pure": pure_cf, "printed_closed_form_mix": mix_cf,
               "pi_star": pi_star, "V_star": v_star}
    checks = {
        "enumeration_matches_solve": max(abs(a - b) for a, b in values.values()) <= 1e-8,
        "mixture_beats_K1": values["mix"][0] - values["K1"][0] >= 1e-6,
        "mixture_beats_K2": values["mix"][0] - values["K2"][0] >= 1e-6,
    }
    algorithm = cfg.algorithm or "spge"
    if algorithm == "exact-pg":
        h = ep.softmax_pg_run(mdp, ctrl, ep.PgRunConfig(horizon=int(cfg.rounds or 2000),
                                                        initial_theta=cfg.param("initial_theta", None)),
                              v_star=v_star, pi_star=pi_star)
        cols, rows, final = history_columns(2), [(0, history_rows(h, False))], h.pi[-1]
        errors = {}
    else:
        env = tb.TabularEnv(mdp)
        cols, rows, hists, errors = _run_spge(cfg, env, tb.tabular_controllers(ctrl), 200, pi_star=pi_star)
        final = _final_pi(hists)
    summary["final_pi_mean"] = final
    checks["converges_to_half"] = bool(np.max(np.abs(final - 0.5)) <= 0.1)
    return _record(cfg.experiment, cols, rows, summary, checks, errors)


def _bandit_instance(cfg: ExperimentConfig, default_values) -> bd.BanditInstance:
    gamma = float(cfg.param("gamma", 0.9))
    if "arm_means" in cfg.params:
        return bd.BanditInstance(cfg.params["arm_means"], cfg.params["controllers"], gamma)
    return bd.BanditInstance.from_values(cfg.param("values", default_values), gamma)


def run_bandit_exact(cfg: ExperimentConfig) -> RunRecord:
    inst = _bandit_instance(cfg, [0.9, 0.1])
    T = int(cfg.rounds or 10_000)
    h = bd.bandit_exact_pg(inst, T)
    M = inst.M
    bound = bd.exact_pg_bound(M, inst.gamma, h.t)
    cum = h.extras["cum_regret"]
    env = bd.regret_envelope(M, inst.gamma, h.t)
    star = h.pi[:, inst.best]
    cols = history_columns(M, extra=("bound", "cum_regret", "regret_envelope"))
    rows = np.hstack([history_rows(h, False), bound[:, None], cum[:, None], env[:, None]])
    tail = h.t >= 2
    summary = {"M": M, "values": inst.values, "final_pi": h.pi[-1], "final_delta": h.delta[-1],
               "max_delta_times_t": float(np.max(h.delta * h.t)), "bound_constant": 5 * M * M / (1 - inst.gamma),
               "final_regret": cum[-1], "final_envelope": env[-1], "inf_pi_star": float(star.min())}
    checks = {
        "delta_below_bound": bool(np.all(h.delta <= bound + 1e-12)),
        "delta_nonincreasing": bool(np.all(np.diff(h.delta) <= 1e-12)),
        "regret_below_envelope": bool(np.all(cum[tail] <= env[tail])),
        "inf_pi_star_is_uniform": abs(star.min() - 1.0 / M) <= 1e-10,
        "pi_star_nondecreasing": bool(np.all(np.diff(star) >= -1e-15)),
    }
    return _record(cfg.experiment, cols, [(0, rows)], summary, checks, {})


def _alg2_trial(inst, alpha, T, seed, name, trial, log_every):
    rng = st.RngStream(seed, name, trial).generator()
    run = bd.projection_free_pg(inst, alpha, T, rng)
    sums = run.pi.sum(axis=1)
    simplex_ok = bool(np.all(np.abs(sums - 1.0) <= 1e-12) and run.pi.min() >= -1e-12)
    keep = np.unique(np.r_[np.arange(log_every - 1, T, log_every), T - 1])
    t = np.arange(1, T + 1)
    rows = np.column_stack([t[keep], run.pi[keep], run.chosen[keep], run.reward[keep],
                            run.instant_regret[keep], run.cum_regret[keep]])
    return rows, simplex_ok, run.final_pi, run.cum_regret


def run_bandit_noisy(cfg: ExperimentConfig) -> RunRecord:
    inst = _bandit_instance(cfg, [0.9, 0.1])
    T = int(cfg.rounds or 100_000)
    alpha = float(cfg.param("step_scale", bd.default_step_scale(inst)))
    log_every = int(cfg.param("log_every", max(1, T // 1000)))
    args = [(inst, alpha, T, cfg.seed, cfg.experiment, i, log_every) for i in range(cfg.trials)]
    errors: dict[int, str] = {}
    res = _collect(_map_trials(_alg2_trial, args, cfg.workers), errors)
    M = inst.M
    cols = ["trial", "t"] + [f"pi_{m + 1}" for m in range(M)] + ["chosen_m", "reward", "instant_regret", "cum_regret"]
    const = bd.regret_constant(inst, alpha)
    finals = np.array([r[2][inst.best] for _, r in res])
    summary = {"step_scale": alpha, "alpha_threshold": bd.alpha_threshold(inst), "regret_constant": const,
               "median_final_pi_star": float(np.median(finals))}
    checks = {"simplex_preserved": all(r[1] for _, r in res)}
    ratios = {}
    for horizon in (10_000, 100_000):
        if horizon <= T:
            vals = [r[3][horizon - 1] / math.log(horizon) for _, r in res]
            ratios[horizon] = float(np.median(vals))
            checks[f"regret_ratio_T{horizon}"] = const / 3 <= ratios[horizon] <= 3 * const
    summary["median_regret_over_logT"] = ratios
    if T >= 100_000:
        checks["median_final_pi_star"] = summary["median_final_pi_star"] >= 0.99
    return _record(cfg.experiment, cols, [(i, r[0]) for i, r in res], summary, checks, errors)


def expert1_simulation(lam, gamma: float, horizon: int, n: int, rng: np.random.Generator) -> dict[str, float]:
    """Monte-Carlo discounted backlog of always serving queue 1 from empty."""
    env, ctrls = qu.build_two_queue_env(lam, controller_spec=("serve1",))
    Q = env.reset(n, rng)
    unserved = np.zeros(n)
    total = np.zeros(n)
    for j in range(horizon):
        unserved += gamma ** j * Q[:, 1]
        total += gamma ** j * Q.sum(axis=1)
        Q, _ = env.step(Q, ctrls[0].act(Q, rng), rng)
    return {"unserved_mean": float(unserved.mean()), "unserved_se": float(unserved.std(ddof=1) / math.sqrt(n)),
            "total_mean": float(total.mean()), "total_se": float(total.std(ddof=1) / math.sqrt(n))}


def run_queue2(cfg: ExperimentConfig) -> RunRecord:
    lam = np.asarray(cfg.param("arrival_rates", [0.49, 0.49]), dtype=float)
    spec = cfg.param("controllers", ["serve1", "serve2"])
    env, ctrls = qu.build_two_queue_env(lam, int(cfg.param("cap", qu.DEFAULT_CAP)), spec,
                                        cfg.param("reward_mode", "backlog"))
    cols, rows, hists, errors = _run_spge(cfg, env, ctrls, 1000, metric_names=("Q1", "Q2"))
    final = _final_pi(hists)
    gamma = float(cfg.param("gamma", 0.9))
    summary = {"arrival_rates": lam, "final_pi_mean": final}
    checks = {}
    if len(ctrls) == 2:
        if abs(lam[0] - lam[1]) < 1e-12:
            checks["pi_near_half"] = bool(np.max(np.abs(final - 0.5)) <= 0.1)
        elif lam[1] > lam[0]:
            checks["pi_K2_above_0.7"] = bool(final[1] > 0.7)
        else:
            checks["pi_K1_above_0.7"] = bool(final[0] > 0.7)
    lam2 = float(lam[1])
    bound = qu.expert1_backlog_bound(lam2, gamma)
    sim = expert1_simulation(lam, gamma, int(cfg.param("expert_horizon", 300)), int(cfg.param("expert_paths", 4000)),
                             st.RngStream(cfg.seed, cfg.experiment, "expert1").generator())
    summary.update({"expert1_bound_unserved": bound,
                    "expert1_bound_total": bound + float(lam[0]) * gamma / (1 - gamma),
                    "expert1_simulation": sim})
    checks["expert1_bound_value"] = abs(bound - lam2 * gamma / (1 - gamma) ** 2) <= 1e-12
    checks["expert1_simulation_within_bound"] = sim["unserved_mean"] <= bound + 3 * sim["unserved_se"]
    return _record(cfg.experiment, cols, rows, summary, checks, errors)


def run_queue2_nonstationary(cfg: ExperimentConfig) -> RunRecord:
    T = int(cfg.rounds or 1500)
    phases = np.asarray(cfg.param("phases", [[0.3, 0.6], [0.6, 0.3], [0.49, 0.49]]), dtype=float)
    schedule = qu.ArrivalSchedule.equal_phases(phases, T)
    env, ctrls = qu.build_two_queue_env(phases[0], int(cfg.param("cap", qu.DEFAULT_CAP)),
                                        reward_mode=cfg.param("reward_mode", "backlog"), schedule=schedule)
    cols, rows, hists, errors = _run_spge(cfg, env, ctrls, T, metric_names=("Q1", "Q2"))
    mean_pi = np.mean([h.pi for _, h in hists], axis=0)
    bounds = list(schedule.starts) + [T + 1]
    at_end = [mean_pi[bounds[k + 1] - 2] for k in range(len(phases))]
    at_start = [mean_pi[bounds[k] - 1] for k in range(len(phases))]
    summary = {"phase_starts": schedule.starts, "pi_at_phase_start": at_start, "pi_at_phase_end": at_end}
    checks = {}
    for k, rates in enumerate(phases):
        if abs(rates[0] - rates[1]) > 1e-12:
            favoured = int(np.argmax(rates))
            checks[f"phase{k + 1}_moves_towards_busier_queue"] = bool(at_end[k][favoured] > at_start[k][favoured])
    return _record(cfg.experiment, cols, rows, summary, checks, errors)


def delay_table(env, ctrls, steps: int, n: int, stream: st.RngStream) -> dict[str, dict[str, float]]:
    out = {}
    for c in ctrls:
        trace = qu.simulate_packets(env, c, steps, n, stream.generator(c.name))
        per = qu.mean_delay_per_trial(trace, n, censor=True)
        out[c.name] = {"mean": float(per.mean()), "std": float(per.std(ddof=1)) if n > 1 else 0.0}
    return out


def run_pathgraph(cfg: ExperimentConfig) -> RunRecord:
    rates = cfg.param("arrival_rates", None)
    env, ctrls = qu.build_path_graph_env(int(cfg.param("num_queues", 4)), rates,
                                         int(cfg.param("cap", qu.DEFAULT_CAP)),
                                         reward_mode=cfg.param("reward_mode", "backlog"),
                                         mer_tiebreak=cfg.param("mer_tiebreak", "backlog"))
    cols, rows, hists, errors = _run_spge(cfg, env, ctrls, 1000)
    final = _final_pi(hists)
    names = [c.name for c in ctrls]
    delays = delay_table(env, ctrls, int(cfg.param("delay_horizon", 1000)), int(cfg.param("delay_trials", 200)),
                         st.RngStream(cfg.seed, cfg.experiment, "delay"))
    d = {k: v["mean"] for k, v in delays.items()}
    fixed = [n for n in names if n not in ("MW", "MER")]
    summary = {"final_pi_mean": dict(zip(names, final)), "mean_delay": delays}
    checks = {"MER_above_0.9": bool(final[names.index("MER")] > 0.9),
              "delay_MER_below_MW": d["MER"] < d["MW"],
              "delay_MW_below_fixed_sets": all(d["MW"] < d[n] for n in fixed)}
    return _record(cfg.experiment, cols, rows, summary, checks, errors)


def _cartpole_trial(model, k_opt, env, spge, ge, seed, name, draw, delta_var, episodes, epls_T, epls_seeds, p_mix):
    stream = st.RngStream(seed, name, draw)
    delta = stream.generator("delta").normal(0.0, math.sqrt(delta_var), size=4)
    gains = [k_opt + delta, k_opt - delta]
    ctrls = [pe.LinearFeedback(gains[0], "K1"), pe.LinearFeedback(gains[1], "K2")]
    h = st.spge_run(env, ctrls, spge, ge, stream.child("spge"))
    learned = h.pi[-1]
    ev = stream.generator("uptime")
    up = [pe.uptime(env, ctrls, pi, episodes, ev).mean() for pi in (learned, [1.0, 0.0], [0.0, 1.0])]
    mats = pe.closed_loop(model, gains)
    p = np.asarray(p_mix)
    estimates = [pe.epls_simulate(mats, p, np.ones(4), epls_T, stream.generator("epls", s)).lyapunov_estimate
                 for s in range(epls_seeds)]
    pure = [pe.epls_simulate([A], [1.0], np.ones(4), epls_T, stream.generator("epls-pure", i)).lyapunov_estimate
            for i, A in enumerate(mats)]
    info = {"delta": delta, "learned_pi": learned, "uptime": up,
            "epls_median": float(np.median(estimates)), "epls_bound": pe.epls_upper_bound(mats, p),
            "epls_pure": pure, "spectral_radius": [pe.spectral_radius(A) for A in mats]}
    return history_rows(h, False, SPGE_EXTRA), info


def run_cartpole(cfg: ExperimentConfig) -> RunRecord:
    model = pe.build_pendulum(dt=float(cfg.param("dt", 0.02)))
    k_opt = pe.dare_solve(model.A_d, model.b_d, np.eye(4), 1.0)
    env = pe.CartpoleEnv(model, noise_std=float(cfg.param("noise_std", 0.01)),
                         fall_angle=math.radians(float(cfg.param("fall_angle_deg", 12.0))),
                         track_limit=float(cfg.param("track_limit", 2.4)),
                         episode_len=int(cfg.param("episode_len", 500)))
    spge, ge = _spge_config(cfg, 300, rescale=True)
    draws = int(cfg.param("draws", 25))
    args = [(model, k_opt, env, spge, ge, cfg.seed, cfg.experiment, d, float(cfg.param("delta_variance", 0.1)),
             cfg.trials, int(cfg.param("epls_rounds", 10_000)), int(cfg.param("epls_seeds", 20)),
             cfg.param("epls_mixture", [0.53, 0.47])) for d in range(draws)]
    errors: dict[int, str] = {}
    res = _collect(_map_trials(_cartpole_trial, args, cfg.workers), errors)
    infos = [r[1] for _, r in res]
    wins = [info["uptime"][0] >= max(info["uptime"][1:]) for info in infos]
    bound_ok = [info["epls_median"] <= info["epls_bound"] + 0.05 for info in infos]
    stabilizing = [info["epls_median"] < 0 and max(info["epls_pure"]) > 0 for info in infos]
    summary = {"K_opt": k_opt, "draws": [_jsonable(i) for i in infos],
               "fraction_mixture_at_least_both": float(np.mean(wins)),
               "fraction_mixture_stabilizes_unstable_corner": float(np.mean(stabilizing))}
    checks = {"epls_bound_respected": all(bound_ok), "mixture_uptime_ordering": float(np.mean(wins)) >= 0.8}
    return _record(cfg.experiment, history_columns(2, extra=SPGE_EXTRA), [(i, r[0]) for i, r in res],
                   summary, checks, errors)


# ---------------------------------------------------------------- theory checks

def _fd_gradient(mdp, ctrl, theta, h=1e-5):
    out = np.empty(theta.size)
    for m in range(theta.size):
        e = np.zeros(theta.size)
        e[m] = h
        out[m] = (md.evaluate_policy(mdp, ctrl, theta + e).V_mu - md.evaluate_policy(mdp, ctrl, theta - e).V_mu) / (2 * h)
    return out


def theory_gradient_check(rng, n=50):
    worst = 0.0
    for _ in range(n):
        S, A, M = rng.integers(2, 11), rng.integers(2, 6), rng.integers(2, 6)
        mdp, ctrl = md.random_instance(S, A, M, float(rng.uniform(0.5, 0.95)), rng)
        theta = rng.normal(size=M)
        g = md.value_gradient_exact(mdp, ctrl, theta)
        fd = _fd_gradient(mdp, ctrl, theta)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
    return worst


def theory_value_difference_check(rng, n=50):
    worst = 0.0
    for _ in range(n):
        S, A, M = rng.integers(2, 8), rng.integers(2, 5), rng.integers(2, 5)
        mdp, ctrl = md.random_instance(S, A, M, float(rng.uniform(0.5, 0.95)), rng)
        th, thp = rng.normal(size=M), rng.normal(size=M)
        s = int(rng.integers(S))
        e = np.eye(S)[s]
        diff = md.evaluate_policy(mdp, ctrl, thp, e).V[s] - md.evaluate_policy(mdp, ctrl, th, e).V[s]
        a, b = md.value_difference_rhs(mdp, ctrl, th, thp, s)
        worst = max(worst, abs(a - diff), abs(b - diff))
    return worst


def theory_smoothness_check(rng, n=100):
    worst, worst_bandit = -math.inf, -math.inf
    mdps = [md.random_instance(4, 3, 3, float(rng.uniform(0.5, 0.95)), rng) for _ in range(10)]
    for k in range(n):
        mdp, ctrl = mdps[k % 10]
        th = rng.normal(size=3) * 2
        d = rng.normal(size=3)
        d *= rng.uniform(0, 1) / np.linalg.norm(d)
        worst = max(worst, ep.smoothness_witness(mdp, ctrl, th, th + d))
        inst = bd.BanditInstance.from_values(rng.uniform(0, 1, 3), float(rng.uniform(0.5, 0.95)))
        bm, bc = md.bandit_as_mdp(inst.arm_means, inst.controllers, inst.gamma)
        worst_bandit = max(worst_bandit, ep.smoothness_witness(bm, bc, th, th + d, beta=bd.bandit_smoothness(inst.gamma)))
    return worst, worst_bandit


def theory_ascent_check(rng, n=100):
    ok = 0
    ok_bandit = 0
    mdps = [md.random_instance(4, 3, 3, float(rng.uniform(0.5, 0.95)), rng) for _ in range(10)]
    for k in range(n):
        mdp, ctrl = mdps[k % 10]
        th = rng.normal(size=3) * 2
        ok += ep.ascent_check(mdp, ctrl, th, 1.0 / ep.smoothness_constant(mdp.gamma))
        inst = bd.BanditInstance.from_values(rng.uniform(0, 1, 3), float(rng.uniform(0.5, 0.95)))
        bm, bc = md.bandit_as_mdp(inst.arm_means, inst.controllers, inst.gamma)
        beta = bd.bandit_smoothness(inst.gamma)
        ok_bandit += ep.ascent_check(bm, bc, th, 1.0 / beta, beta=beta)
    return ok, ok_bandit


def theory_lojasiewicz_check(rng, n=100, num_mdps=10):
    tested = violations = 0
    worst = -math.inf
    per = n // num_mdps
    for _ in range(num_mdps):
        mdp, ctrl = md.random_instance(int(rng.integers(3, 7)), 3, 3, float(rng.uniform(0.5, 0.9)), rng)
        pi_star, _ = ep.best_in_class(mdp, ctrl)
        for _ in range(per):
            gap = ep.lojasiewicz_gap(mdp, ctrl, rng.normal(size=3) * 2, pi_star)
            if not gap.assumption_holds:
                continue
            tested += 1
            worst = max(worst, gap.rhs - gap.lhs)
            violations += not gap.satisfied
    return tested, violations, worst


def theory_trajectory(mdp, ctrl, T):
    pi_star, v_star = ep.best_in_class(mdp, ctrl)
    h = ep.softmax_pg_run(mdp, ctrl, ep.PgRunConfig(horizon=T), v_star=v_star, pi_star=pi_star)
    norms = ep.instance_norms(mdp, ctrl, pi_star)
    bound = ep.convergence_rate_bound(ctrl.M, mdp.gamma, h.t, h.cbar, norms)
    return h, bound, pi_star


def theory_instances(rng, count: int = 5):
    mdp, ctrl = tb.build_nonconcavity_example(1.0, 0.9, compensate_discount=False)
    out = [(mdp.with_distributions(np.full(5, 0.2)), ctrl)]
    for _ in range(count):
        out.append(md.random_instance(int(rng.integers(3, 7)), 3, 3, 0.9, rng))
    return out


def run_theory_checks(cfg: ExperimentConfig) -> RunRecord:
    stream = st.RngStream(cfg.seed, cfg.experiment)
    grad_err = theory_gradient_check(stream.generator("gradient"))
    vd_err = theory_value_difference_check(stream.generator("value-difference"))
    smooth, smooth_bandit = theory_smoothness_check(stream.generator("smoothness"))
    ascent, ascent_bandit = theory_ascent_check(stream.generator("ascent"))
    tested, viol, loj_worst = theory_lojasiewicz_check(stream.generator("lojasiewicz"))
    T = int(cfg.rounds or 5000)
    rows, traj_ok, mono_ok = [], [], []
    cbars = []
    for i, (mdp, ctrl) in enumerate(theory_instances(stream.generator("instances"))):
        h, bound, _ = theory_trajectory(mdp, ctrl, T)
        rows.append((i, np.hstack([history_rows(h, False, pad_to=3), bound[:, None]])))
        traj_ok.append(bool(np.all(h.delta <= bound)))
        mono_ok.append(bool(np.all(np.diff(h.delta) <= 1e-10) and h.delta.min() >= -1e-10))
        cbars.append(h.cbar)
    summary = {"gradient_max_rel_error": grad_err, "value_difference_max_error": vd_err,
               "smoothness_max_witness": smooth, "bandit_smoothness_max_witness": smooth_bandit,
               "ascent_passes": ascent, "bandit_ascent_passes": ascent_bandit,
               "lojasiewicz_tested": tested, "lojasiewicz_violations": viol, "lojasiewicz_worst_rhs_minus_lhs": loj_worst,
               "trajectory_cbar": cbars}
    checks = {"gradient": grad_err <= 1e-6, "value_difference": vd_err <= 1e-9,
              "smoothness": smooth <= 1e-10 and smooth_bandit <= 1e-10,
              "ascent": ascent == 100 and ascent_bandit == 100,
              "lojasiewicz": viol == 0 and tested > 0,
              "trajectory_bound": all(traj_ok), "trajectory_monotone": all(mono_ok)}
    cols = history_columns(3, extra=("bound",))
    return _record(cfg.experiment, cols, rows, summary, checks, {})


RUNNERS: dict[str, Callable[[ExperimentConfig], RunRecord]] = {
    "nonconcavity": run_nonconcavity,
    "chain": run_chain,
    "bandit-exact": run_bandit_exact,
    "bandit-noisy": run_bandit_noisy,
    "queue2": run_queue2,
    "queue2-nonstationary": run_queue2_nonstationary,
    "pathgraph": run_pathgraph,
    "cartpole": run_cartpole,
    "theory-checks": run_theory_checks,
}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunRecord:
    record = RUNNERS[cfg.experiment](cfg)
    if out_dir is not None:
        emit_csv(record, out_dir)
    return record
