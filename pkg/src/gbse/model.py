"""System model, ground-truth simulation, attack injection and objectives.

Conventions shared by the whole package:

- Time indices run over the window ``0..N`` inclusive (``N + 1`` steps).
- Sensors are numbered ``1..M``; grid arrays store sensor ``j`` in column
  ``j - 1``.
- Weighted norms follow ``||v||_S^2 = v^T S v``; measurement residuals are
  weighted by ``R_j^{-1}``, dynamics residuals by ``Q^{-1}``, the prior by
  ``P0^{-1}``.
- Indicator value 1 marks an observation judged anomalous; the reliable
  index set is ``{(t, j) | p[t, j] = 0}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class IllConditionedModelError(RuntimeError):
    """A covariance that must be positive definite failed to factor."""


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------
# One generator family is used everywhere: numpy's PCG64 via default_rng.
# Harness-level seeds are derived with SeedSequence from
# (master_seed, index_0, index_1, ...) so that independent trials are
# reproducible regardless of scheduling or worker count.


def derive_seed(master_seed: int, *indices: int) -> int:
    """Deterministic child seed for trial/attack streams."""
    ss = np.random.SeedSequence([int(master_seed), *[int(i) for i in indices]])
    return int(ss.generate_state(1, np.uint64)[0])


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {arr.shape}")
    return arr


def _check_spd(mat: np.ndarray, name: str) -> None:
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-10 * max(1.0, np.max(np.abs(mat)))):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite (Cholesky failed)") from None


@dataclass(frozen=True)
class SystemModel:
    """LTI plant with M sensors: x_{t+1} = A x_t + w_t, y_{t,j} = C_j x_t + v_{t,j}.

    Parameters
    ----------
    A : (n, n) state transition matrix.
    C : list of M measurement matrices, each (m, n).
    Q : (n, n) process noise covariance, positive definite.
    R : list of M measurement noise covariances, each (m, m), positive definite.
    P0 : (n, n) initial state covariance, positive definite.
    x0_mean : (n,) prior mean of the initial state, defaults to zeros.

    Construction checks symmetry/positive definiteness of Q, P0 and every
    R_j, dimensional consistency, and observability of (A, C_stacked).
    """

    A: np.ndarray
    C: list[np.ndarray]
    Q: np.ndarray
    R: list[np.ndarray]
    P0: np.ndarray
    x0_mean: np.ndarray | None = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        C = [_as_matrix(Cj, f"C[{j}]") for j, Cj in enumerate(self.C)]
        R = [_as_matrix(Rj, f"R[{j}]") for j, Rj in enumerate(self.R)]
        Q = _as_matrix(self.Q, "Q")
        P0 = _as_matrix(self.P0, "P0")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if not C:
            raise ValueError("at least one sensor is required")
        if len(C) != len(R):
            raise ValueError(f"got {len(C)} measurement matrices but {len(R)} noise covariances")
        m = C[0].shape[0]
        for j, Cj in enumerate(C):
            if Cj.shape != (m, n):
                raise ValueError(f"C[{j}] has shape {Cj.shape}, expected {(m, n)}")
        for j, Rj in enumerate(R):
            if Rj.shape != (m, m):
                raise ValueError(f"R[{j}] has shape {Rj.shape}, expected {(m, m)}")
            _check_spd(Rj, f"R[{j}]")
        if Q.shape != (n, n):
            raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
        _check_spd(Q, "Q")
        if P0.shape != (n, n):
            raise ValueError(f"P0 has shape {P0.shape}, expected {(n, n)}")
        _check_spd(P0, "P0")

        x0 = np.zeros(n) if self.x0_mean is None else np.asarray(self.x0_mean, dtype=float)
        if x0.shape != (n,):
            raise ValueError(f"x0_mean has shape {x0.shape}, expected {(n,)}")

        # Observability of (A, stacked C): rank of [C; CA; ...; CA^{n-1}].
        Cs = np.vstack(C)
        blocks = [Cs]
        for _ in range(n - 1):
            blocks.append(blocks[-1] @ A)
        if np.linalg.matrix_rank(np.vstack(blocks)) < n:
            raise ValueError("(A, stacked C) is not observable")

        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "x0_mean", x0)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C[0].shape[0]

    @property
    def M(self) -> int:
        return len(self.C)

    @property
    def is_scalar(self) -> bool:
        # scalar state and scalar sensors enable the fast filter path
        return self.n == 1 and self.m == 1


@dataclass(frozen=True)
class ObservationWindow:
    """Measurement grid y_{t,j} over times 0..N and sensors 1..M.

    values : (N+1, M, m) array; ``values[t, j-1]`` is sensor j's reading at t.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError(f"values must be (N+1, M, m), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation grid contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def N(self) -> int:
        return self.values.shape[0] - 1

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def y(self, t: int, j: int) -> np.ndarray:
        """Measurement of sensor j (1-based) at time t."""
        return self.values[t, j - 1]


@dataclass(frozen=True)
class StateTrajectory:
    """Ground-truth state sequence x_0..x_N, shape (N+1, n)."""

    states: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2:
            raise ValueError(f"states must be (N+1, n), got shape {s.shape}")
        object.__setattr__(self, "states", s)

    @property
    def N(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class IndexSet:
    """Set of reliable grid indices (t, j) with t in 0..N and j in 1..M."""

    entries: frozenset[tuple[int, int]]

    def __init__(self, entries: Iterable[tuple[int, int]] = ()):
        object.__setattr__(
            self, "entries", frozenset((int(t), int(j)) for t, j in entries)
        )

    @classmethod
    def _wrap(cls, entries: frozenset) -> "IndexSet":
        """Internal constructor for already-normalized entries."""
        out = object.__new__(cls)
        object.__setattr__(out, "entries", entries)
        return out

    @classmethod
    def full(cls, N: int, M: int) -> "IndexSet":
        return cls((t, j) for t in range(N + 1) for j in range(1, M + 1))

    def validate(self, N: int, M: int) -> None:
        for t, j in self.entries:
            if not (0 <= t <= N and 1 <= j <= M):
                raise ValueError(f"index ({t}, {j}) outside grid [0,{N}] x [1,{M}]")

    def __contains__(self, item) -> bool:
        return tuple(item) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, t: int, j: int) -> "IndexSet":
        return IndexSet._wrap(self.entries | {(int(t), int(j))})

    def remove(self, t: int, j: int) -> "IndexSet":
        return IndexSet._wrap(self.entries - {(int(t), int(j))})

    def union(self, other: "IndexSet") -> "IndexSet":
        return IndexSet._wrap(self.entries | other.entries)

    def sensors_at(self, t: int) -> list[int]:
        """Active sensors at time t, ascending."""
        return sorted(j for tt, j in self.entries if tt == t)

    def by_time(self, N: int) -> list[list[int]]:
        """Per-time lists of active sensors (ascending), length N+1."""
        out: list[list[int]] = [[] for _ in range(N + 1)]
        for t, j in sorted(self.entries):
            out[t].append(j)
        return out


@dataclass(frozen=True)
class IndicatorSequence:
    """Boolean grid p[t, j-1]; True marks observation (t, j) as anomalous."""

    flags: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flags, dtype=bool)
        if f.ndim != 2:
            raise ValueError(f"flags must be (N+1, M), got shape {f.shape}")
        object.__setattr__(self, "flags", f)

    @property
    def N(self) -> int:
        return self.flags.shape[0] - 1

    @property
    def M(self) -> int:
        return self.flags.shape[1]

    def count(self) -> int:
        return int(self.flags.sum())

    def per_sensor_counts(self) -> np.ndarray:
        """Anomaly counts per sensor, shape (M,) (index j-1 = sensor j)."""
        return self.flags.sum(axis=0)

    def to_index_set(self) -> IndexSet:
        """Reliable index set {(t, j) | p[t, j] = 0}."""
        ts, js = np.nonzero(~self.flags)
        return IndexSet._wrap(frozenset(zip(ts.tolist(), (js + 1).tolist())))

    @classmethod
    def from_index_set(cls, reliable: IndexSet, N: int, M: int) -> "IndicatorSequence":
        flags = np.ones((N + 1, M), dtype=bool)
        for t, j in reliable.entries:
            flags[t, j - 1] = False
        return cls(flags)


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

ATTACK_KINDS = ("none", "random_interference", "constant_bias", "increasing_bias")


@dataclass(frozen=True)
class AttackSpec:
    """False-data-injection attack on a subset of sensors.

    kind
        - "none": identity.
        - "random_interference": add e_t ~ N(0, R_tilde) at every time.
        - "constant_bias": add mu for t >= t_start.
        - "increasing_bias": add (t / N) * mu_max.
    targets
        Attacked sensor numbers (1-based).
    """

    kind: str
    targets: frozenset[int] = field(default_factory=frozenset)
    R_tilde: np.ndarray | None = None
    mu: np.ndarray | None = None
    t_start: int = 0
    mu_max: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "targets", frozenset(int(j) for j in self.targets))
        if self.kind == "random_interference":
            if self.R_tilde is None:
                raise ValueError("random_interference requires R_tilde")
            Rt = _as_matrix(self.R_tilde, "R_tilde")
            _check_spd(Rt, "R_tilde")
            object.__setattr__(self, "R_tilde", Rt)
        elif self.kind == "constant_bias":
            if self.mu is None:
                raise ValueError("constant_bias requires mu")
            object.__setattr__(self, "mu", np.atleast_1d(np.asarray(self.mu, dtype=float)))
            if self.t_start < 0:
                raise ValueError("t_start must be >= 0")
        elif self.kind == "increasing_bias":
            if self.mu_max is None:
                raise ValueError("increasing_bias requires mu_max")
            object.__setattr__(
                self, "mu_max", np.atleast_1d(np.asarray(self.mu_max, dtype=float))
            )

    def validate_for(self, N: int, M: int, m: int) -> None:
        for j in self.targets:
            if not 1 <= j <= M:
                raise ValueError(f"attack target {j} outside 1..{M}")
        if self.kind == "random_interference" and self.R_tilde.shape != (m, m):
            raise ValueError(f"R_tilde has shape {self.R_tilde.shape}, expected {(m, m)}")
        if self.kind == "constant_bias":
            if self.mu.shape != (m,):
                raise ValueError(f"mu has shape {self.mu.shape}, expected {(m,)}")
            if self.t_start > N:
                raise ValueError(f"t_start {self.t_start} beyond horizon {N}")
        if self.kind == "increasing_bias" and self.mu_max.shape != (m,):
            raise ValueError(f"mu_max has shape {self.mu_max.shape}, expected {(m,)}")


def simulate(model: SystemModel, N: int, seed: int) -> tuple[StateTrajectory, ObservationWindow]:
    """Draw a ground-truth trajectory and its clean observation grid.

    x_0 ~ N(x0_mean, P0), x_{t+1} = A x_t + w_t with w_t ~ N(0, Q),
    y_{t,j} = C_j x_t + v_{t,j} with v_{t,j} ~ N(0, R_j).  Bit-identical
    output for a fixed seed.
    """
    if N < 0:
        raise ValueError("N must be >= 0")
    rng = np.random.default_rng(seed)
    n, m, M = model.n, model.m, model.M

    Lp = np.linalg.cholesky(model.P0)
    Lq = np.linalg.cholesky(model.Q)
    Lr = [np.linalg.cholesky(Rj) for Rj in model.R]

    x0 = model.x0_mean + Lp @ rng.standard_normal(n)
    w = rng.standard_normal((N, n)) @ Lq.T
    v = rng.standard_normal((N + 1, M, m))

    states = np.empty((N + 1, n))
    states[0] = x0
    for t in range(N):
        states[t + 1] = model.A @ states[t] + w[t]

    values = np.empty((N + 1, M, m))
    for j in range(M):
        values[:, j, :] = states @ model.C[j].T + v[:, j, :] @ Lr[j].T
    return StateTrajectory(states), ObservationWindow(values)


def apply_attack(window: ObservationWindow, spec: AttackSpec, seed: int) -> ObservationWindow:
    """Inject the attack into targeted sensors; untargeted cells are unchanged."""
    N, M = window.N, window.M
    m = window.values.shape[2]
    spec.validate_for(N, M, m)
    if spec.kind == "none" or not spec.targets:
        return ObservationWindow(window.values.copy())

    rng = np.random.default_rng(seed)
    values = window.values.copy()
    for j in sorted(spec.targets):
        if spec.kind == "random_interference":
            Lt = np.linalg.cholesky(spec.R_tilde)
            values[:, j - 1, :] += rng.standard_normal((N + 1, m)) @ Lt.T
        elif spec.kind == "constant_bias":
            values[spec.t_start:, j - 1, :] += spec.mu
        elif spec.kind == "increasing_bias":
            ramp = np.arange(N + 1) / max(N, 1)
            values[:, j - 1, :] += ramp[:, None] * spec.mu_max
    return ObservationWindow(values)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def _weighted_sq(v: np.ndarray, S_inv: np.ndarray) -> float:
    return float(v @ S_inv @ v)


def _dynamics_cost(model: SystemModel, states: np.ndarray) -> float:
    """Prior + dynamics terms shared by both objectives."""
    Q_inv = np.linalg.inv(model.Q)
    P0_inv = np.linalg.inv(model.P0)
    r0 = states[0] - model.x0_mean
    total = _weighted_sq(r0, P0_inv)
    if states.shape[0] > 1:
        resid = states[1:] - states[:-1] @ model.A.T
        total += float(np.einsum("ti,ij,tj->", resid, Q_inv, resid))
    return total


def objective_l(
    model: SystemModel, window: ObservationWindow, observed: IndexSet, states: np.ndarray
) -> float:
    """Partial-observation objective: restricted measurement fit + dynamics.

    L_O(X) = sum_{(t,j) in O} ||y_{t,j} - C_j x_t||^2_{R_j^-1}
             + sum_t ||x_t - A x_{t-1}||^2_{Q^-1} + ||x_0 - x0_mean||^2_{P0^-1}
    """
    states = np.asarray(states, dtype=float).reshape(window.N + 1, model.n)
    observed.validate(window.N, window.M)
    total = _dynamics_cost(model, states)
    per_sensor: dict[int, list[int]] = {}
    for t, j in observed.entries:
        per_sensor.setdefault(j, []).append(t)
    for j, times in sorted(per_sensor.items()):
        times.sort()
        r = window.values[times, j - 1, :] - states[times] @ model.C[j - 1].T
        R_inv = np.linalg.inv(model.R[j - 1])
        total += float(np.einsum("ti,ik,tk->", r, R_inv, r))
    return total


def objective_w(
    model: SystemModel,
    window: ObservationWindow,
    states: np.ndarray,
    indicators: IndicatorSequence,
    alpha: float,
) -> float:
    """Joint objective over states and indicators.

    W(X, p) = sum_{t,j} [(1 - p_{t,j}) ||y_{t,j} - C_j x_t||^2_{R_j^-1}
              + alpha p_{t,j}] + dynamics and prior terms.
    Equals objective_l over the reliable set plus alpha times the flag count.
    """
    reliable = indicators.to_index_set()
    return objective_l(model, window, reliable, states) + float(alpha) * indicators.count()
