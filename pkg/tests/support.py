"""Shared test fixtures: random instance generators and independent oracles.

The oracles here deliberately avoid the library's computation paths: the
batch solver assembles dense normal equations, the reference filter uses
plain matrix inverses and per-time stacked updates, and the objective
oracle is a term-by-term Python loop.
"""

from __future__ import annotations

import numpy as np

from gbse import IndexSet, ObservationWindow, SystemModel, simulate


def rand_spd(rng, k, lo=0.5, hi=2.0):
    """Random SPD matrix with eigenvalues in [lo, hi]."""
    Qm, _ = np.linalg.qr(rng.standard_normal((k, k)))
    return (Qm * rng.uniform(lo, hi, k)) @ Qm.T


def rand_model(rng, n=None, m=None, M=1, x0_mean=None, spectral=None):
    """Random stable observable model in the benchmark-like regime."""
    if n is None:
        n = int(rng.integers(1, 4))
    if m is None:
        m = n
    A = rng.standard_normal((n, n))
    rho = max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
    A *= (spectral if spectral is not None else rng.uniform(0.5, 0.98)) / rho
    C = []
    for _ in range(M):
        Qm, _ = np.linalg.qr(rng.standard_normal((max(n, m), max(n, m))))
        C.append(Qm[:m, :n] * rng.uniform(0.7, 1.5))
    return SystemModel(
        A=A,
        C=C,
        Q=rand_spd(rng, n),
        R=[rand_spd(rng, m) for _ in range(M)],
        P0=rand_spd(rng, n),
        x0_mean=x0_mean,
    )


def rand_index_set(rng, N, M, density):
    """Random grid subset of roughly the requested density (never empty)."""
    cells = [(t, j) for t in range(N + 1) for j in range(1, M + 1)]
    k = max(1, int(round(density * len(cells))))
    picks = rng.choice(len(cells), size=k, replace=False)
    return IndexSet(cells[i] for i in picks)


def rand_instance(rng, n=None, M=1, N=None, density=None, x0_mean=None):
    """(model, truth, window, observed) drawn from the generator."""
    if N is None:
        N = int(rng.integers(3, 21))
    model = rand_model(rng, n=n, M=M, x0_mean=x0_mean)
    truth, window = simulate(model, N, int(rng.integers(0, 2**32)))
    if density is None:
        density = rng.uniform(0.1, 0.9)
    observed = rand_index_set(rng, N, M, density)
    return model, truth, window, observed


def scalar_model(A=1.0, C=(1.0,), Q=0.5, R=(2.0,), P0=1.0, x0_mean=None):
    """Scalar model in the two-sensor benchmark parameterization."""
    return SystemModel(
        A=[[A]],
        C=[[[c]] for c in C],
        Q=[[Q]],
        R=[[[r]] for r in R],
        P0=[[P0]],
        x0_mean=x0_mean,
    )


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def stacked_quadratic(model, N):
    """Dense (H, prior_lin, prior_const) of the dynamics quadratic form."""
    n = model.n
    d = (N + 1) * n
    Atil = np.eye(d)
    for t in range(1, N + 1):
        Atil[t * n : (t + 1) * n, (t - 1) * n : t * n] = -model.A
    Ptil_inv = np.zeros((d, d))
    Ptil_inv[:n, :n] = np.linalg.inv(model.P0)
    Qi = np.linalg.inv(model.Q)
    for t in range(1, N + 1):
        Ptil_inv[t * n : (t + 1) * n, t * n : (t + 1) * n] = Qi
    H = Atil.T @ Ptil_inv @ Atil
    # Prior term ||Atil X - b||^2 with b = (x0_mean, 0, ...): linear part
    # Atil^T Ptil^-1 b.
    b0 = np.zeros(d)
    b0[:n] = model.x0_mean
    prior_lin = Atil.T @ (Ptil_inv @ b0)
    prior_const = float(model.x0_mean @ np.linalg.inv(model.P0) @ model.x0_mean)
    return H, prior_lin, prior_const


def batch_solve(model, window, observed):
    """Normal-equations minimizer of the partial objective, shape (N+1, n)."""
    N = window.N
    n = model.n
    d = (N + 1) * n
    H, prior_lin, _ = stacked_quadratic(model, N)
    G = np.zeros((d, d))
    b = np.zeros(d)
    for t, j in sorted(observed.entries):
        Cj = model.C[j - 1]
        Ri = np.linalg.inv(model.R[j - 1])
        sl = slice(t * n, (t + 1) * n)
        G[sl, sl] += Cj.T @ Ri @ Cj
        b[sl] += Cj.T @ Ri @ window.values[t, j - 1]
    X = np.linalg.solve(H + G, b + prior_lin)
    return X.reshape(N + 1, n)


def loop_objective(model, window, observed, states, indicators=None, alpha=0.0):
    """Term-by-term objective evaluation with explicit Python loops."""
    N = window.N
    states = np.asarray(states, dtype=float).reshape(N + 1, model.n)
    P0_inv = np.linalg.inv(model.P0)
    Q_inv = np.linalg.inv(model.Q)
    r0 = states[0] - model.x0_mean
    total = float(r0 @ P0_inv @ r0)
    for t in range(1, N + 1):
        r = states[t] - model.A @ states[t - 1]
        total += float(r @ Q_inv @ r)
    if indicators is not None:
        for t in range(N + 1):
            for j in range(1, model.M + 1):
                if indicators.flags[t, j - 1]:
                    total += alpha
                else:
                    r = window.values[t, j - 1] - model.C[j - 1] @ states[t]
                    total += float(r @ np.linalg.inv(model.R[j - 1]) @ r)
    else:
        for t, j in sorted(observed.entries):
            r = window.values[t, j - 1] - model.C[j - 1] @ states[t]
            total += float(r @ np.linalg.inv(model.R[j - 1]) @ r)
    return total


def reference_filter(model, window, observed):
    """Textbook filter with per-time stacked updates and plain inverses.

    Independent of the package's sequential-update path.  Returns
    (pred_means, pred_covs, filt_means, filt_covs).
    """
    N = window.N
    n = model.n
    bytime = observed.by_time(N)
    pred_m = np.zeros((N + 1, n))
    pred_P = np.zeros((N + 1, n, n))
    filt_m = np.zeros((N + 1, n))
    filt_P = np.zeros((N + 1, n, n))
    x = model.x0_mean.copy()
    P = model.P0.copy()
    for t in range(N + 1):
        pred_m[t] = x
        pred_P[t] = P
        active = bytime[t]
        if active:
            C = np.vstack([model.C[j - 1] for j in active])
            R = np.zeros((len(active) * model.m, len(active) * model.m))
            for i, j in enumerate(active):
                R[i * model.m : (i + 1) * model.m, i * model.m : (i + 1) * model.m] = model.R[j - 1]
            y = np.concatenate([window.values[t, j - 1] for j in active])
            S = C @ P @ C.T + R
            K = P @ C.T @ np.linalg.inv(S)
            x = x + K @ (y - C @ x)
            P = (np.eye(n) - K @ C) @ P
        filt_m[t] = x
        filt_P[t] = P
        x = model.A @ x
        P = model.A @ P @ model.A.T + model.Q
    return pred_m, pred_P, filt_m, filt_P
