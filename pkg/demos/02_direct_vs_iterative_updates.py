"""Closed-form vs proximal-gradient estimation, and why warm starts pay off.

Both solvers minimize the same partial-observation objective.  The
iterative path shines when the observation set changes by a single cell:
started from the previous optimum, it converges in a handful of fixed-cost
iterations, with an a-priori bound on how many.
"""

import numpy as np

from gbse import (
    IndexSet,
    SystemModel,
    build_stacked,
    convergence_params,
    estimate_direct,
    estimate_iterative,
    iteration_bound,
    simulate,
)

model = SystemModel(A=[[1.0]], C=[[[1.0]]], Q=[[0.5]], R=[[[2.0]]], P0=[[1.0]])
N = 30
_, window = simulate(model, N, seed=3)

rng = np.random.default_rng(0)
observed = IndexSet((t, 1) for t in sorted(rng.choice(N + 1, size=18, replace=False)))

est, sp = estimate_direct(model, window, observed)
states_cold, trace_cold = estimate_iterative(
    model, window, observed, np.zeros((N + 1, 1)), eps=0.0
)
print(f"direct vs iterative (cold start): max |diff| = "
      f"{np.max(np.abs(est.states - states_cold)):.2e} "
      f"after {trace_cold.iterations} iterations")

# Insert one missing cell and re-estimate from the previous optimum.
missing = [(t, 1) for t in range(N + 1) if (t, 1) not in observed]
k = missing[len(missing) // 2]
larger = observed.add(*k)

sys = build_stacked(model, N)
params = convergence_params(model, sys, larger)
eps = 1e-8
tau = iteration_bound(
    params, sp.means[k[0]], sp.covs[k[0]], window.values[k[0], 0],
    model.C[0], model.R[0], eps,
)
states_warm, trace_warm = estimate_iterative(model, window, larger, est.states, eps=eps)
est2, _ = estimate_direct(model, window, larger)

print(f"\ninserted cell {k}: warm start took {trace_warm.iterations} iterations "
      f"(a-priori bound {tau})")
print(f"warm solution matches re-run direct solve to "
      f"{np.max(np.abs(states_warm - est2.states)):.2e}")
print(f"contraction factor theta = {params.theta:.4f}")
print("\nobjective trace (first 8 iterations):")
for i, v in enumerate(trace_warm.objective[:8]):
    print(f"  iter {i}: {v:.10f}")
