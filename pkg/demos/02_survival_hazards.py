"""
Discrete-time hazards from survival records
===========================================

Simulate subjects whose hazard rises sharply late in the time window,
fit a survival model through the person-period expansion, and compare
the estimated hazard curves with the truth.

Run with ``python3 demos/02_survival_hazards.py``; about ten seconds.
"""

import numpy as np

from tsbart import FitConfig, build_model, expand_survival, predict, run_chain
from tsbart.simbench import Sim2Config, sim2_generate

# --- simulated training data: one row per subject, event flag and time ---
sim = sim2_generate(Sim2Config(scenario="linear_interaction", n=500, n_test=3, seed=4))
train, grid = sim.train, sim.grid
print(f"{train.n} subjects, {int(train.response.sum())} events, "
      f"hazard scale {sim.scale:.3f}")

# each subject contributes one binary row per time it was at risk
table = expand_survival(train, grid)
print(f"person-period table: {table.n_rows} rows")

# --- fit on the full grid so every time value has its own baseline ---
cfg = FitConfig(kind="survival", m=50, n_draws=1000, n_burn=300, kappa=1.0, seed=2,
                keep_loglik=False)
model = build_model(train, cfg, grid=grid)
T = grid.size
pt = np.tile(grid.values, 3)
pX = np.repeat(sim.test_X, T, axis=0)
draws = run_chain(train, cfg, predict_at=(pt, pX), model=model)

# probit scale -> hazard probabilities, then mean and 95% interval per point
est = predict(draws)
truth = sim.h_test.reshape(-1)

print()
print("subject    t   true h   est h   95% interval")
for k in range(pt.size):
    flag = "" if est.lower[k] <= truth[k] <= est.upper[k] else "  <- missed"
    print(f"{k // T:>7} {pt[k]:4.1f} {truth[k]:8.4f} {est.mean[k]:7.4f}   "
          f"[{est.lower[k]:.4f}, {est.upper[k]:.4f}]{flag}")

cover = np.mean((est.lower <= truth) & (truth <= est.upper))
print(f"\npointwise coverage {cover:.2f}, MSE {np.mean((est.mean - truth) ** 2):.5f}")

# survival to the end of the window, per subject, from the posterior mean hazards
surv_true = np.prod(1.0 - sim.h_test, axis=1)
surv_est = np.prod(1.0 - est.mean.reshape(3, T), axis=1)
for i in range(3):
    print(f"subject {i}: P(no event) true {surv_true[i]:.3f}, estimated {surv_est[i]:.3f}")
