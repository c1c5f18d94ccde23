"""Experiment orchestration: detector sweeps, update-rule benchmarks, and
the multi-sensor indicator map, all emitting CSV rows.

Every trial's randomness is derived from (master_seed, sweep index, trial
index), so results are byte-identical regardless of worker count or
scheduling.  Wall-clock columns are zero unless timing is enabled; they are
the one intentionally nondeterministic output.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import baselines, direct, gbs, iterative
from .config import ExperimentConfig, with_override
from .model import AttackSpec, IndexSet, apply_attack, derive_seed, simulate

DETECT_HEADER = [
    "method",
    "attack_kind",
    "intensity",
    "trials",
    "detection_success_rate",
    "false_alarm_rate",
    "mean_mse",
    "mse_stddev",
    "mean_runtime_ms",
    "errors",
]
DETECT_METHODS = ("chi2", "cusum", "resilient", "gbs", "smoother")

BENCH_HEADER = ["step", "method", "wall_time_ms", "iterations", "objective"]
BENCH_PATTERNS = ("timeline", "sensor", "random")

MULTISENSOR_HEADER = ["trial", "time", "sensor", "weighted_error", "indicator"]

SIMULATE_HEADER_PREFIX = ["time", "sensor"]


@dataclass(frozen=True)
class BenchPattern:
    """Observation insertion schedule for the update benchmark."""

    kind: str
    hidden_fraction: float = 0.05

    def __post_init__(self):
        if self.kind not in BENCH_PATTERNS:
            raise ValueError(f"pattern must be one of {BENCH_PATTERNS}")
        if self.kind == "random" and not 0.0 < self.hidden_fraction < 1.0:
            raise ValueError("hidden_fraction must be in (0, 1)")


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".12g")
    return str(x)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def attack_intensity(spec: AttackSpec) -> float:
    """Scalar magnitude of an attack, used for the CSV intensity column."""
    if spec.kind == "random_interference":
        return float(np.max(np.abs(spec.R_tilde)))
    if spec.kind == "constant_bias":
        return float(np.max(np.abs(spec.mu)))
    if spec.kind == "increasing_bias":
        return float(np.max(np.abs(spec.mu_max)))
    return 0.0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def _detect_trial(payload):
    """One trial of the detector comparison; runs in worker processes."""
    cfg, sweep_idx, trial = payload
    model = cfg.model
    sim_seed = derive_seed(cfg.master_seed, sweep_idx, trial, 0)
    atk_seed = derive_seed(cfg.master_seed, sweep_idx, trial, 1)
    truth, clean = simulate(model, cfg.N, sim_seed)
    window = apply_attack(clean, cfg.attack, atk_seed)
    attacked = set(cfg.attack.targets) if cfg.attack.kind != "none" else set()
    full = IndexSet.full(cfg.N, model.M)

    out = {}

    def record(name, fn):
        try:
            start = time.perf_counter() if cfg.timing else 0.0
            states, verdict = fn()
            elapsed = (time.perf_counter() - start) * 1e3 if cfg.timing else 0.0
            metrics = baselines.evaluate(truth, states, verdict, attacked)
            out[name] = (
                metrics.detection_success_rate,
                metrics.false_alarm_rate,
                metrics.mse,
                elapsed,
                None,
            )
        except Exception as exc:  # recorded, never aborts the sweep
            out[name] = (0.0, 0.0, float("nan"), 0.0, f"{type(exc).__name__}: {exc}")

    smoother_states = {}

    def run_smoother():
        est, _ = direct.estimate_direct(model, window, full)
        smoother_states["states"] = est.states

        class _NoAlarms:
            alarms = np.zeros(model.M, dtype=bool)

        return est.states, _NoAlarms()

    record("smoother", run_smoother)
    plain = smoother_states.get("states")
    record(
        "chi2",
        lambda: (plain, baselines.chi2_detector(model, window, cfg.alpha_threshold, cfg.tau)),
    )
    record(
        "cusum",
        lambda: (
            plain,
            baselines.cusum_detector(model, window, cfg.delta_ref, cfg.alpha_threshold, cfg.tau),
        ),
    )
    record(
        "resilient",
        lambda: baselines.resilient_estimator(model, window, cfg.alpha_threshold, cfg.tau),
    )

    def run_gbs():
        res = gbs.gbs_estimate(
            model,
            window,
            gbs.GbsConfig(alpha=cfg.alpha, tau=cfg.tau, eps=cfg.eps, solver=cfg.solver),
        )
        return res.states, res

    record("gbs", run_gbs)
    return out


def _map_trials(worker, payloads, workers: int):
    if workers <= 1:
        return [worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, payloads, chunksize=8))


def run_detect(cfg: ExperimentConfig) -> list[list]:
    """Detector/estimator comparison across the sweep; one row per
    (method, sweep value)."""
    rows: list[list] = []
    if cfg.trials == 0:
        return rows
    sweeps = cfg.sweep_values if cfg.sweep_parameter else [None]
    for sweep_idx, value in enumerate(sweeps):
        sub = cfg if value is None else with_override(cfg, cfg.sweep_parameter, value)
        payloads = [(sub, sweep_idx, t) for t in range(cfg.trials)]
        results = _map_trials(_detect_trial, payloads, cfg.workers)
        intensity = attack_intensity(sub.attack)
        for method in DETECT_METHODS:
            succ, fa, mses, times = [], [], [], []
            errors = 0
            for res in results:
                s, f, mse, ms, err = res[method]
                if err is not None:
                    errors += 1
                    continue
                succ.append(s)
                fa.append(f)
                mses.append(mse)
                times.append(ms)
            ok = len(succ)
            rows.append(
                [
                    method,
                    sub.attack.kind,
                    intensity,
                    ok,
                    float(np.mean(succ)) if ok else float("nan"),
                    float(np.mean(fa)) if ok else float("nan"),
                    float(np.mean(mses)) if ok else float("nan"),
                    float(np.std(mses)) if ok else float("nan"),
                    float(np.mean(times)) if ok else 0.0,
                    errors,
                ]
            )
    return rows


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_schedule(cfg: ExperimentConfig, pattern: BenchPattern, rng):
    """Initial index set plus the per-step lists of inserted cells."""
    N, M = cfg.N, cfg.model.M
    if pattern.kind == "timeline":
        initial = IndexSet()
        steps = [[(t, j) for j in range(1, M + 1)] for t in range(N + 1)]
    elif pattern.kind == "sensor":
        initial = IndexSet()
        steps = [[(t, j) for t in range(N + 1)] for j in range(1, M + 1)]
    else:
        cells = [(t, j) for t in range(N + 1) for j in range(1, M + 1)]
        n_hidden = max(1, int(round(pattern.hidden_fraction * len(cells))))
        hidden_idx = rng.choice(len(cells), size=n_hidden, replace=False)
        hidden = [cells[i] for i in sorted(hidden_idx.tolist())]
        order = rng.permutation(len(hidden))
        initial = IndexSet(set(cells) - set(hidden))
        steps = [[hidden[i]] for i in order.tolist()]
    return initial, steps


def _timed(fn, reps: int):
    """Median wall time over reps (first rep discarded when reps > 1)."""
    times = []
    result = None
    runs = reps + 1 if reps > 1 else 1
    for i in range(runs):
        start = time.perf_counter()
        result = fn()
        times.append((time.perf_counter() - start) * 1e3)
    if reps > 1:
        times = times[1:]
    return result, float(np.median(times))


def run_bench(cfg: ExperimentConfig, pattern: BenchPattern) -> list[list]:
    """Replay an insertion schedule, timing direct vs iterative updates.

    Emits one row per (step, method) with wall time, iteration count
    (iterative only) and the objective value reached.
    """
    model = cfg.model
    rng = np.random.default_rng(derive_seed(cfg.master_seed, 0))
    _, window = simulate(model, cfg.N, derive_seed(cfg.master_seed, 1))
    observed, steps = _bench_schedule(cfg, pattern, rng)

    sys_it = iterative.build_stacked(model, cfg.N)
    fp = direct.filter_partial(model, window, observed)
    direct.smooth(model, fp)
    if len(observed) > 0:
        x_it, _ = iterative.estimate_iterative(
            model, window, observed, np.zeros((cfg.N + 1, model.n)), eps=cfg.eps, sys=sys_it
        )
    else:
        x_it = np.zeros((cfg.N + 1, model.n))

    rows: list[list] = []
    reps = cfg.bench_reps
    for step, cells in enumerate(steps):
        new_observed = observed
        for t, j in cells:
            new_observed = new_observed.add(t, j)
        t0 = min(t for t, _ in cells)
        bytime = new_observed.by_time(cfg.N)

        def direct_update():
            upd = direct.FilterPass(
                observed=new_observed,
                pred_means=fp.pred_means.copy(),
                pred_covs=fp.pred_covs.copy(),
                filt_means=fp.filt_means.copy(),
                filt_covs=fp.filt_covs.copy(),
                gains=fp.gains.copy(),
                innovations=fp.innovations.copy(),
                quad_by_time=fp.quad_by_time.copy(),
            )
            upd.gains[t0:] = 0.0
            upd.innovations[t0:] = 0.0
            direct._filter_range(model, window, bytime, t0, upd)
            sp = direct.smooth(model, upd)
            return upd, sp

        (fp_new, sp_new), ms_direct = _timed(direct_update, reps)
        rows.append([step, "direct", ms_direct, "", fp_new.min_objective()])

        def iterative_update():
            return iterative.estimate_iterative(
                model, window, new_observed, x_it, eps=cfg.eps, sys=sys_it
            )

        (x_new, trace), ms_iter = _timed(iterative_update, reps)
        rows.append([step, "iterative", ms_iter, trace.iterations, 2.0 * float(trace.objective[-1])])

        observed = new_observed
        fp = fp_new
        x_it = x_new
    return rows


# ---------------------------------------------------------------------------
# multisensor
# ---------------------------------------------------------------------------


def _multisensor_trial(payload):
    cfg, trial = payload
    model = cfg.model
    truth, clean = simulate(model, cfg.N, derive_seed(cfg.master_seed, 0, trial, 0))
    window = apply_attack(clean, cfg.attack, derive_seed(cfg.master_seed, 0, trial, 1))
    res = gbs.gbs_estimate(
        model,
        window,
        gbs.GbsConfig(alpha=cfg.alpha, tau=cfg.tau, eps=cfg.eps, solver=cfg.solver),
    )
    errors = gbs.weighted_residuals(model, window, truth.states)
    rows = []
    for t in range(cfg.N + 1):
        for j in range(1, model.M + 1):
            rows.append(
                [trial, t, j, float(errors[t, j - 1]), int(res.indicators.flags[t, j - 1])]
            )
    return rows


def run_multisensor_map(cfg: ExperimentConfig) -> list[list]:
    """Per-(trial, time, sensor) true weighted error and estimated indicator."""
    payloads = [(cfg, t) for t in range(cfg.trials)]
    results = _map_trials(_multisensor_trial, payloads, cfg.workers)
    rows: list[list] = []
    for trial_rows in results:
        rows.extend(trial_rows)
    return rows


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig) -> tuple[list[str], list[list]]:
    """Ground-truth and (post-attack) observation dump for one window."""
    model = cfg.model
    truth, clean = simulate(model, cfg.N, derive_seed(cfg.master_seed, 0))
    window = apply_attack(clean, cfg.attack, derive_seed(cfg.master_seed, 1))
    header = (
        SIMULATE_HEADER_PREFIX
        + [f"y_{i}" for i in range(model.m)]
        + [f"x_{i}" for i in range(model.n)]
    )
    rows = []
    for t in range(cfg.N + 1):
        for j in range(1, model.M + 1):
            rows.append(
                [t, j]
                + [float(v) for v in window.values[t, j - 1]]
                + [float(v) for v in truth.states[t]]
            )
    return header, rows
