"""WAIC and the expected-crossings grid search for the length scale.

Each candidate number of expected crossings is fit with a short chain
and scored by WAIC. A least-squares cubic in the candidate value gives a
Monte Carlo noise scale ``zeta`` (residual standard deviation), and the
smallest candidate whose WAIC lies within ``zeta`` of the minimum wins,
favouring smoother fits when the data cannot tell them apart.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from ._seeding import derive_seed
from .data import Dataset, build_time_grid
from .exceptions import ConfigError, TsbartError
from .kernel import length_scale_from_crossings
from .sampler import FitConfig, run_chain

DEFAULT_CANDIDATES = (0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class WaicResult:
    lppd: float
    p_waic: float
    waic: float


def waic(loglik) -> WaicResult:
    """WAIC from a draws-by-rows matrix of pointwise log-likelihoods.

    ``lppd`` sums the log of each row's mean density (log-sum-exp),
    ``p_waic`` sums the unbiased variances of the log densities and
    ``waic = -2 (lppd - p_waic)``.
    """
    L = np.asarray(loglik, dtype=float)
    if L.ndim != 2 or L.size == 0:
        raise ConfigError("loglik must be a non-empty 2-D array (draws x rows)")
    if L.shape[0] < 2:
        raise ConfigError("WAIC needs at least 2 draws to estimate p_waic")
    if not np.all(np.isfinite(L)):
        raise ConfigError("loglik contains non-finite values")
    S = L.shape[0]
    lppd = float(np.sum(logsumexp(L, axis=0) - math.log(S)))
    p_waic = float(np.sum(np.var(L, axis=0, ddof=1)))
    return WaicResult(lppd, p_waic, -2.0 * (lppd - p_waic))


def cubic_residual_sd(candidates, omegas) -> float:
    """Residual standard deviation (``C - 4`` denominator) of a least-squares cubic.

    With exactly four candidates the cubic interpolates and the result is 0.
    """
    e = np.asarray(candidates, dtype=float)
    w = np.asarray(omegas, dtype=float)
    if e.size < 4 or e.size != w.size:
        raise ConfigError("need at least 4 candidates with one WAIC each")
    if e.size == 4:
        return 0.0
    coef = np.polynomial.polynomial.polyfit(e, w, 3)
    resid = w - np.polynomial.polynomial.polyval(e, coef)
    return float(math.sqrt(np.sum(resid**2) / (e.size - 4)))


def select_crossings(omegas, zeta: float) -> int:
    """Index of the first (smallest) candidate with ``omega <= min(omega) + zeta``."""
    w = np.asarray(omegas, dtype=float)
    if zeta < 0:
        raise ConfigError("zeta must be >= 0")
    return int(np.flatnonzero(w <= w.min() + zeta)[0])


@dataclass(frozen=True)
class CrossingsGrid:
    candidates: tuple
    length_scales: tuple
    results: tuple
    zeta: float
    selected: int

    @property
    def omegas(self) -> np.ndarray:
        return np.array([r.waic for r in self.results])

    @property
    def kappa(self) -> float:
        return self.candidates[self.selected]

    @property
    def length_scale(self) -> float:
        return self.length_scales[self.selected]


@dataclass(frozen=True)
class TuningBudget:
    m: int = 50
    n_draws: int = 2000
    n_burn: int = 500


class TuningError(TsbartError):
    """A candidate chain failed; ``partial`` holds the finished candidates."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def parse_candidates(text: str) -> tuple:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad candidate grid {text!r}; expected comma-separated numbers") from None
    if not values or any(not (v > 0 and math.isfinite(v)) for v in values):
        raise ConfigError(f"candidate grid {text!r} must contain positive numbers")
    return tuple(values)


def _candidate_config(base_cfg: FitConfig, budget: TuningBudget, kappa: float) -> FitConfig:
    return replace(base_cfg, kappa=kappa, length_scale=None, m=budget.m,
                   n_draws=budget.n_draws, n_burn=budget.n_burn, keep_loglik=True,
                   keep_trees=False, thin=1,
                   seed=derive_seed(base_cfg.seed, f"tune/kappa={kappa!r}"))


def _fit_candidate(args):
    dataset, cfg = args
    return waic(run_chain(dataset, cfg).loglik)


def tune_crossings(dataset: Dataset, base_cfg: FitConfig, candidates=DEFAULT_CANDIDATES,
                   budget: TuningBudget = TuningBudget(), jobs: int = 1) -> CrossingsGrid:
    """Grid search over expected crossings by WAIC.

    Candidates are deduplicated and sorted. Each is fit with its own seed
    derived from ``base_cfg.seed`` and the candidate value, so results
    do not depend on the grid they appear in or on ``jobs``.
    """
    cands = tuple(sorted(set(float(c) for c in candidates)))
    if len(cands) < 4:
        raise ConfigError(f"need at least 4 distinct candidates, got {len(cands)}")
    if cands[0] <= 0:
        raise ConfigError("candidates must be positive")
    grid = build_time_grid(dataset)
    lengths = tuple(length_scale_from_crossings(grid.t_range, c) for c in cands)
    tasks = [(dataset, _candidate_config(base_cfg, budget, c)) for c in cands]
    results = []
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for r in pool.map(_fit_candidate, tasks):
                    results.append(r)
        else:
            for task in tasks:
                results.append(_fit_candidate(task))
    except TsbartError as exc:
        partial = list(zip(cands, results))
        raise TuningError(f"tuning chain failed after {len(results)} candidates: {exc}",
                          partial) from exc
    omegas = [r.waic for r in results]
    zeta = cubic_residual_sd(cands, omegas)
    return CrossingsGrid(cands, lengths, tuple(results), zeta, select_crossings(omegas, zeta))


def write_report(grid: CrossingsGrid, path) -> None:
    """CSV of ``kappa, length_scale, waic, lppd, p_waic, selected``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kappa", "length_scale", "waic", "lppd", "p_waic", "selected"])
        for k, (c, l, r) in enumerate(zip(grid.candidates, grid.length_scales, grid.results)):
            w.writerow([repr(c), repr(l), repr(r.waic), repr(r.lppd), repr(r.p_waic),
                        int(k == grid.selected)])
