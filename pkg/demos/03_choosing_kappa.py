"""
Choosing the smoothness by WAIC
===============================

The expected number of crossings ``kappa`` sets the length scale of the
leaf functions through ``l = t_range / (pi * kappa)``. Here a short chain
is run per candidate, each scored by WAIC, and the smallest kappa whose
WAIC is within one noise scale of the best one is kept.

Run with ``python3 demos/03_choosing_kappa.py``; under a minute.
"""

import numpy as np

from tsbart import Dataset, FitConfig, TuningBudget, length_scale_from_crossings, tune_crossings

rng = np.random.default_rng(3)
n = 300
grid = np.arange(1.0, 9.0)
t = rng.choice(grid, n)
X = rng.random((n, 2))

# a slowly varying truth (about one crossing over the window) and a wiggly one
slow = (1 + X[:, 0]) * np.cos(np.pi * (t - 1) / 7)
fast = (1 + X[:, 0]) * np.cos(4 * np.pi * (t - 1) / 7)

candidates = (0.5, 1.0, 2.0, 4.0, 8.0)
budget = TuningBudget(m=20, n_draws=400, n_burn=150)
print("length scales:", {k: round(length_scale_from_crossings(7.0, k), 3) for k in candidates})

for name, f in (("slow", slow), ("wiggly", fast)):
    data = Dataset(f + 0.3 * rng.standard_normal(n), t, X)
    res = tune_crossings(data, FitConfig(seed=11), candidates, budget)
    print(f"\n{name} truth")
    print("  kappa     WAIC")
    for k, w in zip(res.candidates, res.omegas):
        mark = "  <- selected" if k == res.kappa else ""
        print(f"  {k:5.1f} {w:9.2f}{mark}")
    print(f"  noise scale zeta = {res.zeta:.2f}, length scale {res.length_scale:.3f}")
