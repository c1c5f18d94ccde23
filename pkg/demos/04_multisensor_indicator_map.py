"""Indicator map for a 20-sensor network with five jammed sensors.

Sensors 1-5 receive extra noise interference.  The estimated indicator grid
mirrors the map of true observation errors: large weighted errors light up
as flags, concentrated on the attacked sensors.
"""

import numpy as np

from gbse import (
    AttackSpec,
    GbsConfig,
    apply_attack,
    gbs_estimate,
    simulate,
    weighted_residuals,
    SystemModel,
)

M = 20
model = SystemModel(
    A=[[1.0]],
    C=[[[1.0]] for _ in range(M)],
    Q=[[0.5]],
    R=[[[20.0]] for _ in range(M)],
    P0=[[1.0]],
)
N = 20
truth, clean = simulate(model, N, seed=5)
attack = AttackSpec(kind="random_interference", targets={1, 2, 3, 4, 5}, R_tilde=[[100.0]])
window = apply_attack(clean, attack, seed=6)

res = gbs_estimate(model, window, GbsConfig(alpha=6.0, tau=3, solver="direct"))
errors = weighted_residuals(model, window, truth.states)

print("true weighted errors (o < alpha <= #), sensors down, time across:")
for j in range(1, M + 1):
    row = "".join("#" if errors[t, j - 1] > 6.0 else "o" for t in range(N + 1))
    tag = "attacked" if j <= 5 else ""
    print(f"  s{j:02d} {row} {tag}")

print("\nestimated indicators (. = reliable, X = flagged):")
for j in range(1, M + 1):
    row = "".join("X" if res.indicators.flags[t, j - 1] else "." for t in range(N + 1))
    print(f"  s{j:02d} {row}")

counts = res.indicators.per_sensor_counts()
print(f"\nflags on attacked sensors 1-5 : {counts[:5].sum()}")
print(f"flags on clean sensors 6-20   : {counts[5:].sum()}")
print(f"alarms: {np.nonzero(res.alarms)[0] + 1} (sensor numbers)")
