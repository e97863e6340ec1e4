"""
Smooth curves in a target covariate
===================================

Fit one continuous dataset twice: with leaf functions smooth in ``t``
(tsbart mode) and with ``t`` as an ordinary split covariate
(vanilla_bart mode). Then compare the fitted curves for two subjects.

Run with ``python3 demos/01_smooth_curves.py``; a few seconds.
"""

import numpy as np

from tsbart import Dataset, FitConfig, predict, run_chain

# --- data: the curve's amplitude depends on x1, its phase on x2 ---
rng = np.random.default_rng(1)
n = 400
grid = np.arange(1.0, 9.0)
X = rng.random((n, 3))
t = rng.choice(grid, n)


def truth(t, X):
    return (1.0 + 2.0 * X[:, 0]) * np.sin(0.6 * t + 2.0 * X[:, 1])


y = truth(t, X) + 0.5 * rng.standard_normal(n)
data = Dataset(y, t, X)

# two subjects, each evaluated at every grid value
subjects = np.array([[0.1, 0.2, 0.5], [0.9, 0.8, 0.5]])
pt = np.tile(grid, 2)
pX = np.repeat(subjects, grid.size, axis=0)

# --- fit both modes with the same budget and seed ---
budget = dict(m=50, n_draws=1000, n_burn=300, seed=7, keep_loglik=False)
fits = {}
for mode in ("tsbart", "vanilla_bart"):
    draws = run_chain(data, FitConfig(mode=mode, kappa=1.0, **budget), predict_at=(pt, pX))
    fits[mode] = predict(draws)
    print(f"{mode:>13}: mean eta {draws.eta.mean():.3f}, mean sigma {np.sqrt(draws.sigma2).mean():.3f}")

# --- compare the posterior mean curves with the truth ---
f_true = truth(pt, pX)
print()
print("subject  t   truth  tsbart  vanilla")
for k in range(pt.size):
    print(f"{k // grid.size:>7} {pt[k]:3.0f} {f_true[k]:7.3f} {fits['tsbart'].mean[k]:7.3f} "
          f"{fits['vanilla_bart'].mean[k]:8.3f}")

for mode, s in fits.items():
    rmse = np.sqrt(np.mean((s.mean - f_true) ** 2))
    cover = np.mean((s.lower <= f_true) & (f_true <= s.upper))
    print(f"{mode:>13}: RMSE {rmse:.3f}, 95% interval coverage {cover:.2f}")

