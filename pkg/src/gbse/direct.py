"""Closed-form sequence estimation under partial observations.

Kalman filter that skips updates for missing grid cells, RTS smoother, and
the explicit stacked gain mapping observations to smoothed state estimates.

Within a time step, active sensors are processed sequentially in ascending
sensor order (equivalent to one stacked update with block-diagonal noise);
the stacked-gain construction uses the per-time stacked form directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import (
    IllConditionedModelError,
    IndexSet,
    ObservationWindow,
    SystemModel,
)


@dataclass
class FilterPass:
    """Forward pass output.

    pred_means[t], pred_covs[t]   : x and P predicted before time-t updates.
    filt_means[t], filt_covs[t]   : x and P after all active time-t updates.
    gains[t, j-1], innovations[t, j-1] : sequential gain / innovation for
        active cells; exactly zero blocks elsewhere.
    """

    observed: IndexSet
    pred_means: np.ndarray   # (N+1, n)
    pred_covs: np.ndarray    # (N+1, n, n)
    filt_means: np.ndarray   # (N+1, n)
    filt_covs: np.ndarray    # (N+1, n, n)
    gains: np.ndarray        # (N+1, M, n, m)
    innovations: np.ndarray  # (N+1, M, m)
    quad_by_time: np.ndarray  # (N+1,) innovation quadratics e' S^-1 e per step

    @property
    def N(self) -> int:
        return self.pred_means.shape[0] - 1

    def min_objective(self) -> float:
        """Minimum of the partial objective over the pass's index set.

        By the prediction-error decomposition, the optimal value equals the
        sum of the weighted squared innovations of the processed cells.
        """
        return float(self.quad_by_time.sum())


@dataclass
class SmootherPass:
    """Backward pass output; means[N] equals the final filtered mean."""

    means: np.ndarray  # (N+1, n)
    covs: np.ndarray   # (N+1, n, n)
    gains: np.ndarray  # (N, n, n) smoother gains F_t

    @property
    def N(self) -> int:
        return self.means.shape[0] - 1


@dataclass
class StackedEstimate:
    """Stacked state-sequence estimate with per-time covariances."""

    states: np.ndarray        # (N+1, n)
    covariances: np.ndarray   # (N+1, n, n)

    def flat(self) -> np.ndarray:
        return self.states.reshape(-1)


@dataclass
class StackedGain:
    """Explicit linear map from the stacked observation vector to estimates.

    The factors satisfy K = H @ M @ L_star, with L the forward innovation
    model (L @ L_star = I).  Block columns of K for excluded grid cells are
    exactly zero.  Valid for a zero prior mean; O(N^2) memory, intended for
    validation and benchmarking rather than production estimation.
    """

    K: np.ndarray        # ((N+1) n, (N+1) M m)
    M_factor: np.ndarray
    L_star: np.ndarray   # ((N+1) M m, (N+1) M m)
    H_factor: np.ndarray  # ((N+1) n, (N+1) n)
    L: np.ndarray


def _cholesky(mat: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(mat)):
        raise IllConditionedModelError(f"{what} overflowed (non-finite entries)")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise IllConditionedModelError(f"{what} is numerically singular") from None


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _seq_update(x, P, Cj, Rj, y):
    """One sequential measurement update (Joseph form).

    Returns (x_new, P_new, gain, innovation, innovation quadratic).
    """
    S = Cj @ P @ Cj.T + Rj
    L = _cholesky(S, "innovation covariance")
    K = scipy.linalg.cho_solve((L, True), Cj @ P).T
    innov = y - Cj @ x
    quad = float(innov @ scipy.linalg.cho_solve((L, True), innov))
    x = x + K @ innov
    IKC = np.eye(P.shape[0]) - K @ Cj
    P = _symmetrize(IKC @ P @ IKC.T + K @ Rj @ K.T)
    return x, P, K, innov, quad


def _filter_range(model, window, bytime, t0, fp) -> None:
    """Run filter steps t0..N in place; fp.pred_* at t0 must be set."""
    N = window.N
    A, Q = model.A, model.Q
    if model.is_scalar:
        # Plain-float arithmetic with bulk writeback; numpy scalar indexing
        # in the step loop would dominate the runtime.
        a = float(A[0, 0])
        q = float(Q[0, 0])
        cs = [float(Cj[0, 0]) for Cj in model.C]
        rs = [float(Rj[0, 0]) for Rj in model.R]
        ys = window.values[:, :, 0].tolist()
        x = float(fp.pred_means[t0, 0])
        P = float(fp.pred_covs[t0, 0, 0])
        steps = N + 1 - t0
        M = window.M
        pred_m = [0.0] * steps
        pred_P = [0.0] * steps
        filt_m = [0.0] * steps
        filt_P = [0.0] * steps
        quads = [0.0] * steps
        kbuf = [[0.0] * M for _ in range(steps)]
        ibuf = [[0.0] * M for _ in range(steps)]
        for t in range(t0, N + 1):
            i = t - t0
            pred_m[i] = x
            pred_P[i] = P
            quad = 0.0
            row = ys[t]
            krow = kbuf[i]
            irow = ibuf[i]
            for j in bytime[t]:
                c = cs[j - 1]
                r = rs[j - 1]
                s = c * P * c + r
                if not 0.0 < s < float("inf"):
                    raise IllConditionedModelError("innovation covariance is numerically singular")
                k = P * c / s
                innov = row[j - 1] - c * x
                quad += innov * innov / s
                x += k * innov
                ikc = 1.0 - k * c
                P = ikc * P * ikc + k * r * k
                krow[j - 1] = k
                irow[j - 1] = innov
            filt_m[i] = x
            filt_P[i] = P
            quads[i] = quad
            x = a * x
            P = a * P * a + q
        fp.pred_means[t0:, 0] = pred_m
        fp.pred_covs[t0:, 0, 0] = pred_P
        fp.filt_means[t0:, 0] = filt_m
        fp.filt_covs[t0:, 0, 0] = filt_P
        fp.quad_by_time[t0:] = quads
        fp.gains[t0:, :, 0, 0] = kbuf
        fp.innovations[t0:, :, 0] = ibuf
        return

    x = fp.pred_means[t0].copy()
    P = fp.pred_covs[t0].copy()
    for t in range(t0, N + 1):
        fp.pred_means[t] = x
        fp.pred_covs[t] = P
        quad = 0.0
        for j in bytime[t]:
            x, P, K, innov, q_cell = _seq_update(
                x, P, model.C[j - 1], model.R[j - 1], window.values[t, j - 1]
            )
            fp.gains[t, j - 1] = K
            fp.innovations[t, j - 1] = innov
            quad += q_cell
        fp.filt_means[t] = x
        fp.filt_covs[t] = P
        fp.quad_by_time[t] = quad
        x = A @ x
        P = _symmetrize(A @ P @ A.T + Q)


def filter_partial(model: SystemModel, window: ObservationWindow, observed: IndexSet) -> FilterPass:
    """Kalman filter over the window, updating only at active grid cells.

    Prediction runs at every step; updates for cells outside ``observed``
    are skipped (equivalently, their gains are zero).  The pass starts from
    the prior (x0_mean, P0).
    """
    N, M = window.N, window.M
    observed.validate(N, M)
    n, m = model.n, model.m
    fp = FilterPass(
        observed=observed,
        pred_means=np.zeros((N + 1, n)),
        pred_covs=np.zeros((N + 1, n, n)),
        filt_means=np.zeros((N + 1, n)),
        filt_covs=np.zeros((N + 1, n, n)),
        gains=np.zeros((N + 1, M, n, m)),
        innovations=np.zeros((N + 1, M, m)),
        quad_by_time=np.zeros(N + 1),
    )
    fp.pred_means[0] = model.x0_mean
    fp.pred_covs[0] = model.P0
    _filter_range(model, window, observed.by_time(N), 0, fp)
    return fp


def smooth(model: SystemModel, fp: FilterPass) -> SmootherPass:
    """RTS backward pass over a completed filter pass."""
    N, n = fp.N, model.n
    means = np.zeros((N + 1, n))
    covs = np.zeros((N + 1, n, n))
    gains = np.zeros((N, n, n))
    means[N] = fp.filt_means[N]
    covs[N] = fp.filt_covs[N]
    if model.is_scalar:
        a = float(model.A[0, 0])
        pred_m = fp.pred_means[:, 0].tolist()
        pred_P = fp.pred_covs[:, 0, 0].tolist()
        filt_m = fp.filt_means[:, 0].tolist()
        filt_P = fp.filt_covs[:, 0, 0].tolist()
        sm = [0.0] * (N + 1)
        sP = [0.0] * (N + 1)
        sF = [0.0] * N if N else []
        sm[N] = filt_m[N]
        sP[N] = filt_P[N]
        xs = filt_m[N]
        Ps = filt_P[N]
        for t in range(N - 1, -1, -1):
            Pp = pred_P[t + 1]
            if not Pp > 0.0:
                raise IllConditionedModelError("predicted covariance is numerically singular")
            F = filt_P[t] * a / Pp
            xs = filt_m[t] + F * (xs - pred_m[t + 1])
            Ps = filt_P[t] + F * (Ps - Pp) * F
            sm[t] = xs
            sP[t] = Ps
            sF[t] = F
        means[:, 0] = sm
        covs[:, 0, 0] = sP
        if N:
            gains[:, 0, 0] = sF
        return SmootherPass(means, covs, gains)

    A = model.A
    for t in range(N - 1, -1, -1):
        Pp = fp.pred_covs[t + 1]
        L = _cholesky(Pp, "predicted covariance")
        # F = P_filt A^T Pp^{-1}
        F = scipy.linalg.cho_solve((L, True), A @ fp.filt_covs[t]).T
        means[t] = fp.filt_means[t] + F @ (means[t + 1] - fp.pred_means[t + 1])
        covs[t] = _symmetrize(fp.filt_covs[t] + F @ (covs[t + 1] - Pp) @ F.T)
        gains[t] = F
    return SmootherPass(means, covs, gains)


def estimate_direct(
    model: SystemModel, window: ObservationWindow, observed: IndexSet
) -> tuple[StackedEstimate, SmootherPass]:
    """Filter + smooth composition; the minimizer of the partial objective."""
    fp = filter_partial(model, window, observed)
    sp = smooth(model, fp)
    return StackedEstimate(sp.means.copy(), sp.covs.copy()), sp


def recompute_after_insert(
    model: SystemModel,
    window: ObservationWindow,
    observed: IndexSet,
    k: tuple[int, int],
    prev: FilterPass,
) -> tuple[StackedEstimate, SmootherPass]:
    """Update the estimate after inserting grid cell k = (t, j).

    Filter steps before time(k) are reused from ``prev`` unchanged; steps
    from time(k) on and the whole smoother pass are recomputed.  The result
    equals estimate_direct over the enlarged set exactly.
    """
    t_new, j_new = int(k[0]), int(k[1])
    if (t_new, j_new) in observed:
        raise ValueError(f"index {(t_new, j_new)} already observed")
    new_observed = observed.add(t_new, j_new)
    new_observed.validate(window.N, window.M)

    fp = FilterPass(
        observed=new_observed,
        pred_means=prev.pred_means.copy(),
        pred_covs=prev.pred_covs.copy(),
        filt_means=prev.filt_means.copy(),
        filt_covs=prev.filt_covs.copy(),
        gains=prev.gains.copy(),
        innovations=prev.innovations.copy(),
        quad_by_time=prev.quad_by_time.copy(),
    )
    # The prediction entering time(k) is unaffected by the insertion.
    fp.gains[t_new:] = 0.0
    fp.innovations[t_new:] = 0.0
    _filter_range(model, window, new_observed.by_time(window.N), t_new, fp)
    sp = smooth(model, fp)
    return StackedEstimate(sp.means.copy(), sp.covs.copy()), sp


# ---------------------------------------------------------------------------
# Explicit stacked gain
# ---------------------------------------------------------------------------


def _per_time_full_gains(model, fp, bytime) -> np.ndarray:
    """Stacked per-time gains, zero-padded over all M sensors.

    Block j of K_t is the gain the stacked (block-diagonal noise) update at
    time t assigns to sensor j; zero for inactive sensors.
    """
    N = fp.N
    n, m, M = model.n, model.m, model.M
    K_full = np.zeros((N + 1, n, M * m))
    for t in range(N + 1):
        active = bytime[t]
        if not active:
            continue
        C_act = np.vstack([model.C[j - 1] for j in active])
        R_act = scipy.linalg.block_diag(*[model.R[j - 1] for j in active])
        P = fp.pred_covs[t]
        S = C_act @ P @ C_act.T + R_act
        L = _cholesky(S, "innovation covariance")
        Kb = scipy.linalg.cho_solve((L, True), C_act @ P).T  # (n, p)
        for idx, j in enumerate(active):
            K_full[t, :, (j - 1) * m : j * m] = Kb[:, idx * m : (idx + 1) * m]
    return K_full


def build_stacked_gain(
    model: SystemModel, observed: IndexSet, fp: FilterPass, sp: SmootherPass
) -> StackedGain:
    """Assemble the closed-form stacked gain from filter/smoother gains.

    Requires a zero prior mean, under which the estimate is purely linear in
    the stacked observation vector.
    """
    if np.any(model.x0_mean != 0.0):
        raise ValueError("stacked gain requires x0_mean = 0")
    N = fp.N
    n, m, M = model.n, model.m, model.M
    p = M * m
    bytime = observed.by_time(N)
    K_t = _per_time_full_gains(model, fp, bytime)
    C_full = np.vstack(model.C)  # (p, n)

    # Powers of A for Phi(k) = A^k.
    A_pow = [np.eye(n)]
    for _ in range(N):
        A_pow.append(model.A @ A_pow[-1])

    d_x = (N + 1) * n
    d_y = (N + 1) * p

    M_factor = np.zeros((d_x, d_y))
    for t in range(N + 1):
        for i in range(t + 1):
            M_factor[t * n : (t + 1) * n, i * p : (i + 1) * p] = A_pow[t - i] @ K_t[i]

    # Innovation model L (Y = L E) and its inverse L_star (E = L_star Y).
    L = np.zeros((d_y, d_y))
    L_star = np.zeros((d_y, d_y))
    G = [model.A @ (np.eye(n) - K_t[t] @ C_full) for t in range(N + 1)]
    for t in range(N + 1):
        L[t * p : (t + 1) * p, t * p : (t + 1) * p] = np.eye(p)
        L_star[t * p : (t + 1) * p, t * p : (t + 1) * p] = np.eye(p)
        acc = np.eye(n)  # product G_{t-1} ... G_{i+1}, built from the left
        for i in range(t - 1, -1, -1):
            L[t * p : (t + 1) * p, i * p : (i + 1) * p] = C_full @ A_pow[t - i] @ K_t[i]
            L_star[t * p : (t + 1) * p, i * p : (i + 1) * p] = -C_full @ acc @ model.A @ K_t[i]
            acc = acc @ G[i]

    # Smoother map H: row t = [0 ... I - F_t A, then F_t * (row t+1 tail)].
    H_factor = np.zeros((d_x, d_x))
    H_factor[N * n :, N * n :] = np.eye(n)
    for t in range(N - 1, -1, -1):
        F = sp.gains[t]
        H_factor[t * n : (t + 1) * n, t * n : (t + 1) * n] = np.eye(n) - F @ model.A
        H_factor[t * n : (t + 1) * n, (t + 1) * n :] = F @ H_factor[
            (t + 1) * n : (t + 2) * n, (t + 1) * n :
        ]

    K = H_factor @ M_factor @ L_star
    return StackedGain(K=K, M_factor=M_factor, L_star=L_star, H_factor=H_factor, L=L)
