"""Gaussian-Bernoulli secure estimator.

Joint minimization over a state sequence and per-cell anomaly indicators:
a rough gated forward pass seeds the alternation, indicator and state
updates alternate until the reliable set stabilizes, and a per-cell
re-evaluation sweep (solving the two candidate problems for each cell)
escapes suboptimal fixed points.  A sensor raises an alarm when its
anomaly count exceeds the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import direct, iterative
from .model import (
    IndexSet,
    IndicatorSequence,
    ObservationWindow,
    SystemModel,
    objective_l,
)

_SOLVERS = ("direct", "iterative", "auto")


class GbsConvergenceError(RuntimeError):
    """Outer loop exceeded its cap; carries the partial result."""

    def __init__(self, message: str, partial: "GbsResult"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class GbsConfig:
    """Estimator knobs.

    alpha : anomaly penalty (> 0); a cell is worth discarding when its
        weighted squared residual exceeds alpha.
    tau : per-sensor anomaly count tolerated before the alarm (>= 0).
    eps : inner iterative-solver stop threshold (None = solver default).
    max_outer : cap on outer iterations; exceeding it raises.
    solver : "direct", "iterative", or "auto" (direct first solve, then
        warm-started iterative re-estimation).
    """

    alpha: float
    tau: int = 0
    eps: float | None = None
    max_outer: int = 100
    solver: str = "auto"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.solver not in _SOLVERS:
            raise ValueError(f"solver must be one of {_SOLVERS}")


@dataclass
class GbsResult:
    states: np.ndarray            # (N+1, n)
    indicators: IndicatorSequence
    alarms: np.ndarray            # (M,) bool; index j-1 = sensor j
    objective: float              # final joint objective value
    outer_iters: int
    inner_iters: list[int] = field(default_factory=list)
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


class _Solver:
    """Re-estimation backend honoring the configured solver policy."""

    def __init__(self, model: SystemModel, window: ObservationWindow, cfg: GbsConfig):
        self.model = model
        self.window = window
        self.cfg = cfg
        self._sys: iterative.StackedSystem | None = None
        self._used_direct_once = False

    def _stacked(self) -> iterative.StackedSystem:
        if self._sys is None:
            self._sys = iterative.build_stacked(self.model, self.window.N)
        return self._sys

    def solve(
        self, observed: IndexSet, warm: np.ndarray | None = None
    ) -> tuple[np.ndarray, float, int]:
        """Minimize the partial objective; returns (states, value, inner iterations)."""
        mode = self.cfg.solver
        use_direct = mode == "direct" or (
            mode == "auto" and (not self._used_direct_once or warm is None)
        )
        if use_direct:
            fp = direct.filter_partial(self.model, self.window, observed)
            sp = direct.smooth(self.model, fp)
            self._used_direct_once = True
            # Prediction-error decomposition: the optimal value is the sum
            # of the weighted squared innovations along the pass.
            return sp.means, fp.min_objective(), 0
        x0 = warm if warm is not None else np.zeros((self.window.N + 1, self.model.n))
        states, trace = iterative.estimate_iterative(
            self.model, self.window, observed, x0, eps=self.cfg.eps, sys=self._stacked()
        )
        # phi tracks (f+g)/2 through exact decrements; the unscaled value is 2 phi.
        return states, 2.0 * float(trace.objective[-1]), trace.iterations


def weighted_residuals(
    model: SystemModel, window: ObservationWindow, states: np.ndarray
) -> np.ndarray:
    """Grid of ||y_{t,j} - C_j x_t||^2_{R_j^-1}, shape (N+1, M)."""
    states = np.asarray(states, dtype=float).reshape(window.N + 1, model.n)
    out = np.empty((window.N + 1, model.M))
    for j in range(model.M):
        r = window.values[:, j, :] - states @ model.C[j].T
        Ri = np.linalg.inv(model.R[j])
        out[:, j] = np.einsum("ti,ik,tk->t", r, Ri, r)
    return out


def update_indicators(
    model: SystemModel, window: ObservationWindow, states: np.ndarray, alpha: float
) -> IndicatorSequence:
    """Best indicator grid for fixed states: flag iff residual weight > alpha."""
    return IndicatorSequence(weighted_residuals(model, window, states) > alpha)


def initial_strategy(
    model: SystemModel, window: ObservationWindow, alpha: float
) -> tuple[IndicatorSequence, np.ndarray]:
    """Gated forward pass for a rough first guess.

    Each cell is tested against the running one-step estimate: residual
    weight above alpha flags the cell and skips its measurement update;
    reliable cells update the estimate.  Returns the flags and the per-time
    filtered means.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    N, M = window.N, window.M
    n = model.n
    flags = np.zeros((N + 1, M), dtype=bool)
    states = np.empty((N + 1, n))

    if model.is_scalar:
        a = float(model.A[0, 0])
        q = float(model.Q[0, 0])
        cs = [float(Cj[0, 0]) for Cj in model.C]
        rs = [float(Rj[0, 0]) for Rj in model.R]
        ys = window.values[:, :, 0]
        x = float(model.x0_mean[0])
        P = float(model.P0[0, 0])
        for t in range(N + 1):
            for j in range(M):
                c, r = cs[j], rs[j]
                resid = ys[t, j] - c * x
                if resid * resid / r > alpha:
                    flags[t, j] = True
                    continue
                s = c * P * c + r
                k = P * c / s
                x += k * resid
                ikc = 1.0 - k * c
                P = ikc * P * ikc + k * r * k
            states[t, 0] = x
            x = a * x
            P = a * P * a + q
        return IndicatorSequence(flags), states

    R_inv = [np.linalg.inv(Rj) for Rj in model.R]
    x = model.x0_mean.copy()
    P = model.P0.copy()
    for t in range(N + 1):
        for j in range(1, M + 1):
            Cj = model.C[j - 1]
            resid = window.values[t, j - 1] - Cj @ x
            if float(resid @ R_inv[j - 1] @ resid) > alpha:
                flags[t, j - 1] = True
                continue
            x, P, _, _, _ = direct._seq_update(x, P, Cj, model.R[j - 1], window.values[t, j - 1])
        states[t] = x
        x = model.A @ x
        P = direct._symmetrize(model.A @ P @ model.A.T + model.Q)
    return IndicatorSequence(flags), states


def refine_indicator(
    model: SystemModel,
    window: ObservationWindow,
    indicators: IndicatorSequence,
    k: tuple[int, int],
    alpha: float,
    cfg: GbsConfig,
    warm: tuple[np.ndarray, float, IndexSet] | None = None,
    solver: _Solver | None = None,
) -> bool:
    """Re-decide one cell jointly with the states.

    Solves the partial problem with cell k included and excluded (the other
    indicators fixed) and flags k anomalous iff including it raises the
    optimal value by more than alpha.  ``warm`` may carry the already
    solved (states, value, set) for the current reliable set.
    """
    t, j = int(k[0]), int(k[1])
    if solver is None:
        solver = _Solver(model, window, cfg)
    # The warm tuple carries the current reliable set; it must match the
    # indicators, so reuse it instead of rebuilding.
    reliable = warm[2] if warm is not None else indicators.to_index_set()
    o_plus = reliable if (t, j) in reliable else reliable.add(t, j)
    o_minus = o_plus.remove(t, j)

    warm_states = warm[0] if warm is not None else None

    def value_for(target: IndexSet) -> float:
        if warm is not None and target.entries == warm[2].entries:
            return warm[1]
        _, value, _ = solver.solve(target, warm=warm_states)
        return value

    return (value_for(o_plus) - value_for(o_minus)) > alpha


def gbs_estimate(model: SystemModel, window: ObservationWindow, cfg: GbsConfig) -> GbsResult:
    """Run the full alternation and alarm decision.

    Alternates the indicator update and the state re-estimation; when the
    reliable set stabilizes, sweeps all cells through refine_indicator in
    ascending (time, sensor) order and applies the first disagreement, then
    re-enters the loop.  Terminates when a sweep changes nothing.  Sensor j
    alarms when its anomaly count exceeds cfg.tau.
    """
    N, M = window.N, window.M
    solver = _Solver(model, window, cfg)

    indicators, states = initial_strategy(model, window, cfg.alpha)
    reliable_prev = indicators.to_index_set()
    value_prev = objective_l(model, window, reliable_prev, states)
    trace = [value_prev + cfg.alpha * indicators.count()]
    states_set: IndexSet | None = None  # set the current states are optimal for
    inner_iters: list[int] = []

    outer = 0
    while outer < cfg.max_outer:
        outer += 1
        indicators = update_indicators(model, window, states, cfg.alpha)
        reliable = indicators.to_index_set()

        flipped = False
        if reliable.entries == reliable_prev.entries:
            if states_set is None or states_set.entries != reliable.entries:
                states, value_prev, ii = solver.solve(reliable, warm=states)
                inner_iters.append(ii)
                states_set = reliable
            warm = (states, value_prev, reliable)
            flat_flags = indicators.flags.copy()
            for t in range(N + 1):
                for j in range(1, M + 1):
                    better = refine_indicator(
                        model, window, indicators, (t, j), cfg.alpha, cfg,
                        warm=warm, solver=solver,
                    )
                    if better != bool(flat_flags[t, j - 1]):
                        flat_flags[t, j - 1] = better
                        indicators = IndicatorSequence(flat_flags)
                        reliable = indicators.to_index_set()
                        flipped = True
                        break
                if flipped:
                    break

        if reliable.entries == reliable_prev.entries and not flipped:
            break

        states, value_prev, ii = solver.solve(reliable, warm=states)
        inner_iters.append(ii)
        states_set = reliable
        reliable_prev = reliable
        trace.append(value_prev + cfg.alpha * indicators.count())
    else:
        partial = GbsResult(
            states=states,
            indicators=indicators,
            alarms=indicators.per_sensor_counts() > cfg.tau,
            objective=trace[-1],
            outer_iters=outer,
            inner_iters=inner_iters,
            trace=np.asarray(trace),
        )
        raise GbsConvergenceError(
            f"no fixed point within {cfg.max_outer} outer iterations", partial
        )

    objective = value_prev + cfg.alpha * indicators.count()
    return GbsResult(
        states=states,
        indicators=indicators,
        alarms=indicators.per_sensor_counts() > cfg.tau,
        objective=float(objective),
        outer_iters=outer,
        inner_iters=inner_iters,
        trace=np.asarray(trace),
    )


def brute_force_mip(
    model: SystemModel, window: ObservationWindow, alpha: float
) -> tuple[IndicatorSequence, np.ndarray, float]:
    """Global minimizer by enumerating every indicator pattern.

    Guarded to grids of at most 20 cells.  Ties break toward fewer flags,
    then lexicographically over the (time-major, sensor) flag tuple.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    N, M = window.N, window.M
    cells = [(t, j) for t in range(N + 1) for j in range(1, M + 1)]
    if len(cells) > 20:
        raise ValueError(f"grid has {len(cells)} cells; enumeration guard is 20")

    best_key = None
    best: tuple[IndicatorSequence, np.ndarray, float] | None = None
    for mask in range(2 ** len(cells)):
        pattern = tuple((mask >> i) & 1 for i in range(len(cells)))
        reliable = IndexSet(c for i, c in enumerate(cells) if not pattern[i])
        est, _ = direct.estimate_direct(model, window, reliable)
        count = sum(pattern)
        value = objective_l(model, window, reliable, est.states) + alpha * count
        key = (value, count, pattern)
        if best_key is None or key < best_key:
            best_key = key
            flags = np.array(pattern, dtype=bool).reshape(N + 1, M)
            best = (IndicatorSequence(flags), est.states, float(value))
    return best
