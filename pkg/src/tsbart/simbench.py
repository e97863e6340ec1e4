"""Simulation studies and the tsBART vs. vanilla BART benchmark harness.

Suite ``sim1`` is a continuous regression whose covariates modulate the
amplitude and phase of periodic functions of ``t``. Suite ``sim2`` is a
discrete-time survival problem whose hazard mixes a linear baseline with
a late "hockey stick" rise, with covariate-dependent weights.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, ndtr
from scipy.stats import norm, rankdata

from ._seeding import derive_seed, make_rng
from .data import Dataset, TimeGrid
from .exceptions import ConfigError, TsbartError
from .sampler import FitConfig, PosteriorDraws, build_model, run_chain, summarize

logger = logging.getLogger(__name__)

SIM1_GRID = np.arange(1.0, 9.0)
SIM2_GRID = np.round(np.linspace(0.0, 1.0, 11), 10)
SCENARIOS = ("linear", "linear_interaction", "nonlinear_interaction")
RHO = 1.0 + math.log(0.1) / math.log(0.75)
HAZARD_CAP = 1.0 - 1e-6
METHODS = ("tsbart", "vanilla_bart")


# --- simulation 1 ------------------------------------------------------------------


@dataclass(frozen=True)
class Sim1Config:
    n: int = 500
    p: int = 4
    pair_correlation: float = 0.5
    seed: int = 0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.p < 4 or self.p % 2:
            raise ConfigError(f"p must be even and >= 4, got {self.p}")
        if not -1.0 < self.pair_correlation < 1.0:
            raise ConfigError("pair_correlation must be in (-1, 1)")


def sim1_f(t, X) -> np.ndarray:
    """Sum over blocks of four covariates of ``g * trig(t + 2 pi h)``.

    Block ``k`` uses ``g = x_{4k+1} + x_{4k+2}`` and ``h = x_{4k+3} + x_{4k+4}``
    with ``cos`` for even ``k`` and ``sin`` for odd ``k``. A trailing pair
    that does not complete a block is noise.
    """
    t = np.asarray(t, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros(X.shape[0])
    for k in range(X.shape[1] // 4):
        g = X[:, 4 * k] + X[:, 4 * k + 1]
        h = X[:, 4 * k + 2] + X[:, 4 * k + 3]
        trig = np.cos if k % 2 == 0 else np.sin
        out += g * trig(t + 2.0 * np.pi * h)
    return out


def _sim1_draw(cfg: Sim1Config, rng: np.random.Generator):
    cov = np.array([[1.0, cfg.pair_correlation], [cfg.pair_correlation, 1.0]])
    X = rng.multivariate_normal(np.zeros(2), cov, size=(cfg.n, cfg.p // 2)).reshape(cfg.n, cfg.p)
    t = rng.choice(SIM1_GRID, size=cfg.n)
    f = sim1_f(t, X)
    y = f + cfg.noise_sd * rng.standard_normal(cfg.n)
    return Dataset(y, t, X, "continuous"), f


@dataclass(frozen=True)
class Sim1Data:
    train: Dataset
    test: Dataset
    f_train: np.ndarray
    f_test: np.ndarray


def sim1_generate(cfg: Sim1Config) -> Sim1Data:
    """Training set and an independent test set of the same size, with the true ``f``."""
    rng = make_rng(cfg.seed, "sim1")
    train, f_train = _sim1_draw(cfg, rng)
    test, f_test = _sim1_draw(cfg, rng)
    return Sim1Data(train, test, f_train, f_test)


# --- simulation 2 ------------------------------------------------------------------


@dataclass(frozen=True)
class Sim2Config:
    scenario: str = "linear_interaction"
    n: int = 500
    seed: int = 0
    target_survival: float = 0.5
    n_test: int = 200
    p: int = 10

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n < 1 or self.n_test < 1:
            raise ConfigError("n and n_test must be >= 1")
        if not 0.0 < self.target_survival < 1.0:
            raise ConfigError("target_survival must be in (0, 1)")
        if self.p < 5:
            raise ConfigError("sim2 needs at least 5 covariates")


def sim2_weight(scenario: str, x) -> np.ndarray:
    """Mixing weight of the late-rise risk function."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    if scenario == "linear":
        z = 5.0 * (x1 - x2 + x3 - x4)
    elif scenario == "linear_interaction":
        z = (5.0 * (x1 - x2) + 5.0 * (x1 - 0.5) * (x2 - 0.5)
             + 5.0 * (x3 - x4) + 5.0 * (x3 - 0.5) * (x4 - 0.5))
    elif scenario == "nonlinear_interaction":
        z = 5.0 * np.maximum(x1, x2) - 5.0 * np.maximum(x3, x4)
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    return expit(z)


def f1(t):
    return 0.075 * np.asarray(t, dtype=float)


def f2(t):
    return 0.75 * np.maximum(0.75, np.asarray(t, dtype=float)) ** RHO


def sim2_hazard(scenario: str, t, x, scale: float = 1.0) -> np.ndarray:
    """Hazard ``scale * (0.25 x5 + w(x) f2(t) + (1 - w(x)) f1(t))``, clamped below 1.

    ``t`` is a scalar or one value per row of ``x``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = sim2_weight(scenario, x)
    return _clamp(scale * (0.25 * x[:, 4] + w * f2(t) + (1.0 - w) * f1(t)))


def sim2_hazard_table(scenario: str, times, x, scale: float = 1.0) -> np.ndarray:
    """Hazards of every row of ``x`` at every value of ``times``, shape ``(n, T)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = sim2_weight(scenario, x)[:, None]
    times = np.asarray(times, dtype=float)[None, :]
    return _clamp(scale * (0.25 * x[:, 4:5] + w * f2(times) + (1.0 - w) * f1(times)))


def _clamp(h):
    if np.any(h >= 1.0):
        warnings.warn("rescaled hazard reached 1; clamping", RuntimeWarning, stacklevel=3)
        h = np.minimum(h, HAZARD_CAP)
    return h


def survival_probability(hazards) -> np.ndarray:
    """Probability of no event over the whole grid, per subject."""
    return np.prod(1.0 - np.asarray(hazards, dtype=float), axis=-1)


def rescale_factor(raw_hazards, target_survival: float, tol: float = 1e-12) -> float:
    """Constant ``c`` with mean survival of ``c * raw_hazards`` equal to ``target_survival``.

    Found by bisection; the clamp at ``1 - 1e-6`` keeps survival monotone in ``c``.
    """
    raw = np.asarray(raw_hazards, dtype=float)

    def surv(c):
        return float(np.mean(survival_probability(np.minimum(c * raw, HAZARD_CAP))))

    lo, hi = 0.0, 1.0
    while surv(hi) > target_survival:
        hi *= 2.0
        if hi > 1e12:
            raise ConfigError("hazards too small to reach the target survival")
    while hi - lo > tol * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if surv(mid) > target_survival:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def simulate_events(hazards, grid: TimeGrid, X, rng: np.random.Generator) -> Dataset:
    """Sequential Bernoulli sweep over the grid; the first success is the event.

    Subjects with no success are censored at the last grid value.
    """
    H = np.atleast_2d(np.asarray(hazards, dtype=float))
    if np.any(H < 0) or np.any(H >= 1):
        raise ConfigError("hazards must lie in [0, 1)")
    hit = rng.random(H.shape) < H
    any_hit = hit.any(axis=1)
    first = np.where(any_hit, hit.argmax(axis=1), H.shape[1] - 1)
    return Dataset(any_hit.astype(float), grid.values[first], X, "survival", response_name="event")


@dataclass(frozen=True)
class Sim2Data:
    train: Dataset
    test_X: np.ndarray
    grid: TimeGrid
    scale: float
    h_train: np.ndarray
    h_test: np.ndarray


def sim2_generate(cfg: Sim2Config) -> Sim2Data:
    """Training subjects with simulated event times plus held-out covariates and true hazards.

    The rescaling constant is calibrated on the training covariates.
    """
    rng = make_rng(cfg.seed, "sim2")
    grid = TimeGrid(SIM2_GRID)
    X = rng.random((cfg.n, cfg.p))
    X_test = rng.random((cfg.n_test, cfg.p))
    raw = sim2_hazard_table(cfg.scenario, grid.values, X)
    scale = rescale_factor(raw, cfg.target_survival)
    h_train = sim2_hazard_table(cfg.scenario, grid.values, X, scale)
    h_test = sim2_hazard_table(cfg.scenario, grid.values, X_test, scale)
    train = simulate_events(h_train, grid, X, rng)
    return Sim2Data(train, X_test, grid, scale, h_train, h_test)


# --- metrics ------------------------------------------------------------------------


def predictive_loglik(draws: PosteriorDraws, response) -> np.ndarray:
    """Draws-by-points log predictive density of ``response`` at the registered points."""
    y = np.asarray(response, dtype=float)
    mean = draws.pred_latent
    if draws.probit:
        p = np.clip(ndtr(mean), 1e-300, None)
        q = np.clip(ndtr(-mean), 1e-300, None)
        return np.where(y > 0.5, np.log(p), np.log(q))
    s2 = draws.sigma2[:, None]
    return -0.5 * np.log(2.0 * np.pi * s2) - (y - mean) ** 2 / (2.0 * s2)


def log_loss(loglik) -> float:
    """Mean over draws of the per-row average log density (larger is better)."""
    L = np.atleast_2d(np.asarray(loglik, dtype=float))
    return float(np.mean(np.mean(L, axis=1)))


def coverage_and_mse(values, truth, level: float = 0.95):
    """Share of points whose truth is inside the equal-tailed interval, and MSE of the mean."""
    s = summarize(values, level)
    truth = np.asarray(truth, dtype=float)
    inside = (s.lower <= truth) & (truth <= s.upper)
    return float(inside.mean()), float(np.mean((s.mean - truth) ** 2))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int


def _signed_rank_null(ranks2) -> np.ndarray:
    """Null distribution of twice the positive rank sum for integer doubled ranks."""
    total = int(sum(ranks2))
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:total + 1 - r]
        dist = 0.5 * (dist + shifted)
    return dist


def wilcoxon(x, y=None, exact_max: int = 25) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped. For up to ``exact_max`` remaining pairs
    the p-value is exact (ties handled through midranks); beyond that the
    normal approximation with tie-corrected variance is used.
    """
    d = np.asarray(x, dtype=float)
    if y is not None:
        d = d - np.asarray(y, dtype=float)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max:
        ranks2 = np.rint(2.0 * ranks).astype(int)
        dist = _signed_rank_null(ranks2)
        w2 = int(round(2.0 * w_plus))
        lower = dist[:w2 + 1].sum()
        upper = dist[w2:].sum()
        p = min(1.0, 2.0 * min(lower, upper))
    else:
        _, counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
        z = (w_plus - mean) / math.sqrt(var) if var > 0 else 0.0
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return WilcoxonResult(w_plus, float(p), n)


# --- benchmark -----------------------------------------------------------------------


@dataclass(frozen=True)
class Budget:
    m: int = 50
    n_draws: int = 2000
    n_burn: int = 500
    kappa: float = 1.0


@dataclass
class MetricReport:
    suite: str
    replicate: int
    method: str
    logloss_in: float = float("nan")
    logloss_out: float = float("nan")
    mse: float = float("nan")
    coverage: float = float("nan")
    per_time_coverage: list = field(default_factory=list)
    per_time_mse: list = field(default_factory=list)
    seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _fit_cfg(kind, method, budget: Budget, seed) -> FitConfig:
    return FitConfig(kind=kind, mode=method, m=budget.m, n_draws=budget.n_draws,
                     n_burn=budget.n_burn, kappa=budget.kappa, seed=seed)


def _per_time(values, truth, tidx, n_grid, level):
    cov, mse = [], []
    for s in range(n_grid):
        sel = tidx == s
        if not sel.any():
            cov.append(float("nan"))
            mse.append(float("nan"))
            continue
        c, e = coverage_and_mse(values[:, sel], truth[sel], level)
        cov.append(c)
        mse.append(e)
    return cov, mse


def _run_sim1(rep: int, cfg: Sim1Config, budget: Budget, methods, master: int):
    data = sim1_generate(cfg)
    test = data.test
    tidx = np.searchsorted(SIM1_GRID, test.t)
    out = []
    for method in methods:
        seed = derive_seed(master, f"sim1/rep{rep}/{method}")
        rep_out = MetricReport("sim1", rep, method)
        try:
            draws = run_chain(data.train, _fit_cfg("continuous", method, budget, seed),
                              predict_at=(test.t, test.X))
        except TsbartError as exc:
            rep_out.error = f"{type(exc).__name__}: {exc}"
            out.append(rep_out)
            continue
        rep_out.logloss_in = log_loss(draws.loglik)
        rep_out.logloss_out = log_loss(predictive_loglik(draws, test.response))
        rep_out.coverage, rep_out.mse = coverage_and_mse(draws.pred_latent, data.f_test)
        rep_out.per_time_coverage, rep_out.per_time_mse = _per_time(
            draws.pred_latent, data.f_test, tidx, SIM1_GRID.size, 0.95)
        rep_out.seconds = draws.elapsed
        out.append(rep_out)
    return out


def _run_sim2(rep: int, cfg: Sim2Config, budget: Budget, methods, master: int):
    data = sim2_generate(cfg)
    grid = data.grid
    T = grid.size
    n_test = data.test_X.shape[0]
    # held-out covariates crossed with every grid time
    pt = np.tile(grid.values, n_test)
    pX = np.repeat(data.test_X, T, axis=0)
    truth = data.h_test.reshape(-1)
    tidx = np.tile(np.arange(T), n_test)
    # a held-out survival sample from the same covariates for out-of-sample log-loss
    rng = make_rng(cfg.seed, "sim2/test-events")
    test_events = simulate_events(data.h_test, grid, data.test_X, rng)
    at_risk = tidx <= np.repeat(grid.index_of(test_events.t), T)
    event_row = (tidx == np.repeat(grid.index_of(test_events.t), T)) & np.repeat(
        test_events.response > 0.5, T)
    out = []
    for method in methods:
        seed = derive_seed(master, f"sim2/rep{rep}/{method}")
        rep_out = MetricReport("sim2", rep, method)
        fit_cfg = _fit_cfg("survival", method, budget, seed)
        try:
            # the full simulation grid, so every held-out time is predictable
            model = build_model(data.train, fit_cfg, grid=grid)
            draws = run_chain(data.train, fit_cfg, predict_at=(pt, pX), model=model)
        except TsbartError as exc:
            rep_out.error = f"{type(exc).__name__}: {exc}"
            out.append(rep_out)
            continue
        values = draws.pred_response()
        rep_out.logloss_in = log_loss(draws.loglik)
        ll = predictive_loglik(draws, event_row.astype(float))
        rep_out.logloss_out = log_loss(ll[:, at_risk])
        rep_out.coverage, rep_out.mse = coverage_and_mse(values, truth)
        rep_out.per_time_coverage, rep_out.per_time_mse = _per_time(values, truth, tidx, T, 0.95)
        rep_out.seconds = draws.elapsed
        out.append(rep_out)
    return out


def _replicate_task(args):
    suite, rep, cfg, budget, methods, master = args
    if suite == "sim1":
        return _run_sim1(rep, cfg, budget, methods, master)
    return _run_sim2(rep, cfg, budget, methods, master)


@dataclass
class BenchmarkResult:
    suite: str
    reports: list
    summary: list
    p_value: float
    config: dict


def _replicate_config(suite, cfg, rep, master):
    seed = derive_seed(master, f"{suite}/rep{rep}/data")
    if suite == "sim1":
        return Sim1Config(cfg.n, cfg.p, cfg.pair_correlation, seed, cfg.noise_sd)
    return Sim2Config(cfg.scenario, cfg.n, seed, cfg.target_survival, cfg.n_test, cfg.p)


def run_benchmark(suite: str, cfg, replicates: int, budget: Budget = Budget(),
                  methods=METHODS, seed: int = 0, jobs: int = 1) -> BenchmarkResult:
    """Fit each method on ``replicates`` simulated datasets and compare.

    Replicate ``r`` draws its data and chain seeds from ``seed`` and ``r``
    only, so results are identical for any ``jobs``. Failed fits are
    reported and left out of the averages. The p-value is a paired
    Wilcoxon signed-rank test of out-of-sample log-loss between the first
    two methods over replicates where both succeeded.
    """
    if suite not in ("sim1", "sim2"):
        raise ConfigError(f"unknown suite {suite!r}")
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    tasks = [(suite, r, _replicate_config(suite, cfg, r, seed), budget, tuple(methods), seed)
             for r in range(replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            nested = list(pool.map(_replicate_task, tasks))
    else:
        nested = [_replicate_task(t) for t in tasks]
    reports = [r for rep in nested for r in rep]
    for r in reports:
        if not r.ok:
            logger.warning("%s replicate %d (%s) failed: %s", suite, r.replicate, r.method, r.error)

    p_value = float("nan")
    if len(methods) >= 2:
        a, b = methods[0], methods[1]
        by = {(r.replicate, r.method): r for r in reports}
        pairs = [(by[(k, a)].logloss_out, by[(k, b)].logloss_out) for k in range(replicates)
                 if by[(k, a)].ok and by[(k, b)].ok]
        if pairs:
            x, y = np.array(pairs).T
            p_value = wilcoxon(x, y).p_value

    summary = []
    for method in methods:
        ok = [r for r in reports if r.method == method and r.ok]
        row = {"suite": suite, "method": method, "replicates": len(ok),
               "failed": sum(1 for r in reports if r.method == method and not r.ok)}
        for key in ("logloss_in", "logloss_out", "coverage", "mse"):
            row[key] = float(np.mean([getattr(r, key) for r in ok])) if ok else float("nan")
        row["p_value"] = p_value
        summary.append(row)
    conf = {"suite": suite, "replicates": replicates, "seed": seed, "jobs": jobs,
            "methods": list(methods), "budget": asdict(budget), "data": asdict(cfg)}
    return BenchmarkResult(suite, reports, summary, p_value, conf)


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_summary(result: BenchmarkResult, path) -> None:
    """Averaged table, one row per method."""
    data = result.config["data"]
    lead = ["p", "n"] if result.suite == "sim1" else ["scenario", "n"]
    cols = lead + ["method", "replicates", "failed", "logloss_in", "logloss_out",
                   "coverage", "mse", "p_value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.summary:
            full = {**{k: data[k] for k in lead}, **row}
            w.writerow([_cell(full[c]) for c in cols])


def write_replicates(result: BenchmarkResult, path) -> None:
    """Long table, one row per replicate and method."""
    cols = ["replicate", "method", "logloss_in", "logloss_out", "coverage", "mse", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in result.reports:
            w.writerow([_cell(getattr(r, c)) for c in cols])
