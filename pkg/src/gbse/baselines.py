"""Comparison detectors and estimators, plus per-trial evaluation metrics.

All of these run the same filter core as the direct estimator so that
comparisons isolate the decision rule, not the numerics.  Statistics are
computed per sensor: the chi-square statistic weights each sensor's
innovation by its own innovation covariance under the all-sensor filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import direct
from .model import (
    IndexSet,
    ObservationWindow,
    StateTrajectory,
    SystemModel,
)


@dataclass
class DetectorVerdict:
    """Per-cell flags, per-sensor alarms, and the statistic behind them."""

    flags: np.ndarray       # (N+1, M) bool
    alarms: np.ndarray      # (M,) bool
    statistics: np.ndarray  # (N+1, M) float


@dataclass
class Metrics:
    """Per-trial evaluation: rates are 0/1 here and averaged by the harness."""

    detection_success_rate: float
    mse: float
    false_alarm_rate: float


def _innovation_statistics(model: SystemModel, window: ObservationWindow) -> np.ndarray:
    """Per-(t, j) squared innovations weighted by their innovation covariance.

    Runs the full-observation filter; the statistic for sensor j at time t
    uses the one-step prediction before any time-t update.
    """
    N, M = window.N, window.M
    full = IndexSet.full(N, M)
    fp = direct.filter_partial(model, window, full)
    stats = np.empty((N + 1, M))
    for j in range(M):
        Cj = model.C[j]
        innov = window.values[:, j, :] - fp.pred_means @ Cj.T
        # S_t = C_j P_pred_t C_j^T + R_j per time step
        S = np.einsum("ik,tkl,jl->tij", Cj, fp.pred_covs, Cj) + model.R[j]
        if model.m == 1:
            stats[:, j] = innov[:, 0] ** 2 / S[:, 0, 0]
        else:
            stats[:, j] = np.einsum("ti,tik,tk->t", innov, np.linalg.inv(S), innov)
    return stats


def chi2_detector(
    model: SystemModel, window: ObservationWindow, alpha_threshold: float, tau: int
) -> DetectorVerdict:
    """Flag cells whose innovation statistic exceeds the threshold.

    Sensor j alarms when its flag count exceeds tau.
    """
    if not alpha_threshold > 0:
        raise ValueError("alpha_threshold must be > 0")
    stats = _innovation_statistics(model, window)
    flags = stats > alpha_threshold
    return DetectorVerdict(flags=flags, alarms=flags.sum(axis=0) > tau, statistics=stats)


def cusum_detector(
    model: SystemModel,
    window: ObservationWindow,
    delta_ref: float = 0.5,
    alpha_threshold: float = 6.0,
    tau: int = 0,
) -> DetectorVerdict:
    """Accumulate innovation-statistic drift above delta_ref per sensor.

    S_0 = 0 and S_t = max(0, S_{t-1} + (r_t - delta_ref)) with r_t the
    chi-square statistic; flag when S_t exceeds the threshold.
    """
    if not alpha_threshold > 0:
        raise ValueError("alpha_threshold must be > 0")
    r = _innovation_statistics(model, window)
    S = np.zeros_like(r)
    for t in range(1, r.shape[0]):
        S[t] = np.maximum(0.0, S[t - 1] + (r[t] - delta_ref))
    flags = S > alpha_threshold
    return DetectorVerdict(flags=flags, alarms=flags.sum(axis=0) > tau, statistics=S)


def resilient_estimator(
    model: SystemModel, window: ObservationWindow, alpha_threshold: float, tau: int = 0
) -> tuple[np.ndarray, DetectorVerdict]:
    """One-pass filter that drops high-innovation cells, then smooths.

    Within each time step the active sensors are tested sequentially
    against the running estimate; a cell whose innovation statistic exceeds
    the threshold is flagged and skipped, with no later revisiting.  The
    smoother runs over the surviving set.
    """
    if not alpha_threshold > 0:
        raise ValueError("alpha_threshold must be > 0")
    N, M = window.N, window.M
    flags = np.zeros((N + 1, M), dtype=bool)
    stats = np.zeros((N + 1, M))
    kept: list[tuple[int, int]] = []

    if model.is_scalar:
        a = float(model.A[0, 0])
        q = float(model.Q[0, 0])
        cs = [float(Cj[0, 0]) for Cj in model.C]
        rs = [float(Rj[0, 0]) for Rj in model.R]
        ys = window.values[:, :, 0].tolist()
        x = float(model.x0_mean[0])
        P = float(model.P0[0, 0])
        for t in range(N + 1):
            row = ys[t]
            for j in range(1, M + 1):
                c = cs[j - 1]
                r = rs[j - 1]
                s = c * P * c + r
                innov = row[j - 1] - c * x
                stat = innov * innov / s
                stats[t, j - 1] = stat
                if stat > alpha_threshold:
                    flags[t, j - 1] = True
                    continue
                kept.append((t, j))
                k = P * c / s
                x += k * innov
                ikc = 1.0 - k * c
                P = ikc * P * ikc + k * r * k
            x = a * x
            P = a * P * a + q
    else:
        x = model.x0_mean.copy()
        P = model.P0.copy()
        for t in range(N + 1):
            for j in range(1, M + 1):
                Cj = model.C[j - 1]
                y = window.values[t, j - 1]
                S = Cj @ P @ Cj.T + model.R[j - 1]
                innov = y - Cj @ x
                stat = float(innov @ np.linalg.solve(S, innov))
                stats[t, j - 1] = stat
                if stat > alpha_threshold:
                    flags[t, j - 1] = True
                    continue
                kept.append((t, j))
                x, P, _, _, _ = direct._seq_update(x, P, Cj, model.R[j - 1], y)
            x = model.A @ x
            P = direct._symmetrize(model.A @ P @ model.A.T + model.Q)

    est, _ = direct.estimate_direct(model, window, IndexSet(kept))
    verdict = DetectorVerdict(flags=flags, alarms=flags.sum(axis=0) > tau, statistics=stats)
    return est.states, verdict


def evaluate(
    truth: StateTrajectory,
    states: np.ndarray | None,
    verdict_or_result,
    attacked_sensors: set[int],
) -> Metrics:
    """Score one trial.

    Detection succeeds iff every attacked sensor alarms and no clean sensor
    does; a false alarm is any alarm on a clean sensor.  MSE is the mean
    over time of the squared state error (NaN when the method produces no
    estimate).
    """
    alarms = np.asarray(getattr(verdict_or_result, "alarms"), dtype=bool)
    M = alarms.shape[0]
    attacked = np.zeros(M, dtype=bool)
    for j in attacked_sensors:
        if not 1 <= j <= M:
            raise ValueError(f"attacked sensor {j} outside 1..{M}")
        attacked[j - 1] = True

    false_alarm = bool(np.any(alarms & ~attacked))
    success = bool(np.all(alarms[attacked])) and not false_alarm
    if states is None:
        mse = float("nan")
    else:
        err = truth.states - np.asarray(states, dtype=float).reshape(truth.states.shape)
        mse = float(np.mean(np.sum(err * err, axis=1)))
    return Metrics(
        detection_success_rate=float(success),
        mse=mse,
        false_alarm_rate=float(false_alarm),
    )
