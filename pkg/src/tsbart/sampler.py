"""Bayesian backfitting sampler for targeted-smoothing BART.

The model is ``w_i = alpha(t_i) + eta * f(t_i, x_i) + eps_i`` where ``w``
is the response (continuous) or a probit latent (binary, survival), ``f``
is a sum of ``m`` trees whose leaves are functions on the time grid with
prior ``N(0, Sigma0)`` and ``Sigma0`` has variance ``1/m``. ``eta`` is a
redundant scale with a normal prior centred at ``tau0`` whose variance
``gamma2`` has an ``IG(1/2, 1/2)`` prior, so ``eta - tau0`` is Cauchy.

One iteration updates every tree in turn (grow/prune Metropolis-Hastings
followed by a draw of all its leaf functions), then ``sigma2``
(continuous data only), ``eta``, ``gamma2`` and finally the latents.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri
from scipy.stats import chi2

from . import _kernels as K
from .data import (
    BaselineFunction,
    Dataset,
    TimeGrid,
    build_time_grid,
    cell_baseline,
    estimate_alpha,
    expand_survival,
)
from .exceptions import ConfigError, DataError, NumericalError
from .kernel import KernelSpec, LeafPrior, build_leaf_prior, length_scale_from_crossings
from .trees import Cutpoints, Tree, TreePriorConfig, dump_trees, load_trees

logger = logging.getLogger(__name__)

MODES = ("tsbart", "vanilla_bart")
LOG_2PI = math.log(2.0 * math.pi)
TAIL_CUTOFF = 5.0


@dataclass(frozen=True)
class FitConfig:
    """Sampler settings.

    Parameters
    ----------
    kind : {'continuous', 'binary', 'survival'}
    mode : {'tsbart', 'vanilla_bart'}
        ``vanilla_bart`` uses scalar leaves and lets ``t`` be split on.
    m : int
        Number of trees.
    n_draws, n_burn, thin : int
        Retained draws, discarded warm-up iterations and thinning interval.
    kappa : float
        Expected number of crossings; ignored if ``length_scale`` is set.
    nu, q_sigma : float
        Inverse chi-square prior on ``sigma2`` with ``P(sigma <= sigma_hat) = q_sigma``.
    sigma2_extra_df : int
        Added to the ``nu + N`` degrees of freedom of the ``sigma2`` draw.
    fixed_sigma2, fixed_eta : float, optional
        Hold these parameters fixed instead of sampling them.
    allow_grow : bool
        If False, trees stay stumps (only leaf functions are sampled).
    keep_loglik, keep_trees : bool
        Store the pointwise log-likelihood matrix / a text dump of every
        retained forest.
    audit_every : int
        Recompute the cached forest fit from scratch every this many
        iterations and fail if it drifted by more than 1e-8.
    """

    kind: str = "continuous"
    mode: str = "tsbart"
    m: int = 200
    n_draws: int = 10000
    n_burn: int = 1000
    thin: int = 1
    kappa: float = 1.0
    length_scale: float | None = None
    nu: float = 3.0
    q_sigma: float = 0.9
    sigma2_extra_df: int = 0
    tree_prior: TreePriorConfig = field(default_factory=TreePriorConfig)
    max_cuts: int = 100
    seed: int = 0
    fixed_sigma2: float | None = None
    fixed_eta: float | None = None
    allow_grow: bool = True
    keep_loglik: bool = True
    keep_trees: bool = False
    audit_every: int = 100

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "survival"):
            raise ConfigError(f"unknown kind {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.n_draws < 1 or self.n_burn < 0 or self.thin < 1:
            raise ConfigError("need n_draws >= 1, n_burn >= 0 and thin >= 1")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.length_scale is not None and not self.length_scale > 0:
            raise ConfigError(f"length_scale must be positive, got {self.length_scale}")
        if not self.nu > 0:
            raise ConfigError("nu must be positive")
        if not 0.0 < self.q_sigma < 1.0:
            raise ConfigError("q_sigma must be in (0, 1)")
        if self.max_cuts < 1:
            raise ConfigError("max_cuts must be >= 1")
        if self.fixed_sigma2 is not None and not self.fixed_sigma2 > 0:
            raise ConfigError("fixed_sigma2 must be positive")
        if self.audit_every < 0:
            raise ConfigError("audit_every must be >= 0")

    @property
    def probit(self) -> bool:
        return self.kind != "continuous"


@dataclass(frozen=True)
class Model:
    """Data and priors of one fit, fixed for the whole chain.

    ``row_tidx`` indexes the data grid (for ``alpha``); ``leaf_tidx``
    indexes leaf functions and is all zeros in vanilla mode.
    """

    kind: str
    mode: str
    grid: TimeGrid
    leaf_prior: LeafPrior
    alpha: BaselineFunction
    response: np.ndarray
    row_tidx: np.ndarray
    leaf_tidx: np.ndarray
    cutpoints: Cutpoints
    xbin: np.ndarray
    m: int
    tree_prior: TreePriorConfig
    nu: float
    lam: float
    tau0: float
    sigma_hat: float
    subject: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.response.size)

    @property
    def probit(self) -> bool:
        return self.kind != "continuous"

    @property
    def leaf_size(self) -> int:
        return self.leaf_prior.size

    def split_matrix(self, t, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.mode == "vanilla_bart":
            return np.column_stack([X, np.asarray(t, dtype=float)])
        return X

    def design(self, t, X):
        """Grid indices, leaf-grid indices and binned covariates for points ``(t, X)``."""
        tidx = self.grid.index_of(np.atleast_1d(t))
        leaf = tidx if self.mode == "tsbart" else np.zeros_like(tidx)
        xb = self.cutpoints.bin(self.split_matrix(np.atleast_1d(t), X))
        if xb.shape[0] != tidx.size:
            raise DataError("prediction t and X have different lengths")
        return tidx, np.ascontiguousarray(leaf), np.ascontiguousarray(xb)


def calibrate_lambda(sigma_hat: float, nu: float, q: float) -> float:
    """Scale ``lam`` with ``P(sigma <= sigma_hat) = q`` under ``sigma2 ~ nu lam / chi2_nu``."""
    return float(sigma_hat**2 * chi2.ppf(1.0 - q, nu) / nu)


def ols_sigma(y, t, X) -> float:
    """Residual standard deviation of the least-squares fit of ``y`` on ``(1, t, X)``."""
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones_like(y), t, X])
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    dof = y.size - rank
    if dof <= 0:
        sd = float(np.std(y, ddof=1)) if y.size > 1 else 1.0
    else:
        sd = float(math.sqrt(np.sum((y - A @ coef) ** 2) / dof))
    return sd if sd > 0 else 1.0


def resolve_length_scale(cfg: FitConfig, grid: TimeGrid) -> float:
    if cfg.length_scale is not None:
        return float(cfg.length_scale)
    if grid.size < 2:
        return 1.0  # a one-point grid has no correlation to set
    return length_scale_from_crossings(grid.t_range, cfg.kappa)


def build_model(dataset: Dataset, cfg: FitConfig, *, alpha=None, lam=None, tau0=None,
                grid: TimeGrid | None = None) -> Model:
    """Assemble the fixed ingredients of a fit.

    ``alpha``, ``lam`` and ``tau0`` default to the data-based choices
    (per-time means or probit rates, calibrated ``lam``, ``sd(y)`` or 1)
    and can be overridden, e.g. for prior-simulation checks.
    """
    if dataset.kind != cfg.kind:
        raise ConfigError(f"config kind {cfg.kind!r} does not match data kind {dataset.kind!r}")
    if grid is None:
        grid = build_time_grid(dataset, allow_single=True)
    subject = None
    if cfg.kind == "survival":
        table = expand_survival(dataset, grid)
        response, row_tidx, t_rows, X_rows, subject = (
            table.event, table.tidx, table.s, table.X, table.subject)
    else:
        response, row_tidx = dataset.response, grid.index_of(dataset.t)
        t_rows, X_rows = dataset.t, dataset.X

    if cfg.mode == "tsbart":
        leaf_grid = grid
        leaf_tidx = row_tidx
        if alpha is None:
            alpha = estimate_alpha(table if cfg.kind == "survival" else dataset, grid).alpha
    else:
        leaf_grid = TimeGrid(grid.values[:1])
        leaf_tidx = np.zeros_like(row_tidx)
        if alpha is None:
            # one cell: the overall mean or probit of the overall rate
            alpha = cell_baseline(np.zeros_like(row_tidx), response, leaf_grid, cfg.kind).alpha[0]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (grid.size,)).copy()
    baseline = BaselineFunction(grid, alpha)

    spec = KernelSpec(resolve_length_scale(cfg, grid), 1.0 / cfg.m)
    leaf_prior = build_leaf_prior(leaf_grid, spec)

    X_split = X_rows if cfg.mode == "tsbart" else np.column_stack([X_rows, t_rows])
    cutpoints = Cutpoints.from_data(X_split, cfg.max_cuts)

    if cfg.probit:
        sigma_hat = 1.0
        lam = 1.0 if lam is None else lam
        tau0 = 1.0 if tau0 is None else tau0
    else:
        sigma_hat = ols_sigma(dataset.response, dataset.t, dataset.X)
        if lam is None:
            lam = calibrate_lambda(sigma_hat, cfg.nu, cfg.q_sigma)
        if tau0 is None:
            sd = float(np.std(dataset.response, ddof=1)) if dataset.n > 1 else 0.0
            tau0 = sd if sd > 0 else 1.0

    return Model(
        kind=cfg.kind, mode=cfg.mode, grid=grid, leaf_prior=leaf_prior, alpha=baseline,
        response=np.ascontiguousarray(response, dtype=float),
        row_tidx=np.ascontiguousarray(row_tidx, dtype=np.int64),
        leaf_tidx=np.ascontiguousarray(leaf_tidx, dtype=np.int64),
        cutpoints=cutpoints, xbin=np.ascontiguousarray(cutpoints.bin(X_split)),
        m=cfg.m, tree_prior=cfg.tree_prior, nu=float(cfg.nu), lam=float(lam),
        tau0=float(tau0), sigma_hat=float(sigma_hat), subject=subject,
    )


# --- chain state ---------------------------------------------------------------


class Forest:
    """``m`` trees in stacked flat arrays with row and prediction-point routing."""

    def __init__(self, m: int, n_rows: int, n_pred: int, n_grid: int, capacity: int = 8):
        self.var = np.full((m, capacity), -1, dtype=np.int64)
        self.cut = np.full((m, capacity), -1, dtype=np.int64)
        self.cutval = np.full((m, capacity), np.nan)
        self.left = np.full((m, capacity), -1, dtype=np.int64)
        self.right = np.full((m, capacity), -1, dtype=np.int64)
        self.parent = np.full((m, capacity), -1, dtype=np.int64)
        self.depth = np.zeros((m, capacity), dtype=np.int64)
        self.alive = np.zeros((m, capacity), dtype=bool)
        self.alive[:, 0] = True
        self.mu = np.zeros((m, capacity, n_grid))
        self.leaf_of_row = np.zeros((m, n_rows), dtype=np.int64)
        self.leaf_of_pred = np.zeros((m, n_pred), dtype=np.int64)

    @property
    def m(self) -> int:
        return int(self.var.shape[0])

    @property
    def capacity(self) -> int:
        return int(self.var.shape[1])

    def ensure_free(self, free: int = 2) -> None:
        """Double node capacity until every tree has ``free`` unused slots."""
        while int((self.capacity - self.alive.sum(axis=1)).min()) < free:
            extra = self.capacity
            m = self.m

            def widen(a, fill):
                pad = np.full((m, extra) + a.shape[2:], fill, dtype=a.dtype)
                return np.ascontiguousarray(np.concatenate([a, pad], axis=1))

            self.var = widen(self.var, -1)
            self.cut = widen(self.cut, -1)
            self.cutval = widen(self.cutval, np.nan)
            self.left = widen(self.left, -1)
            self.right = widen(self.right, -1)
            self.parent = widen(self.parent, -1)
            self.depth = widen(self.depth, 0)
            self.alive = widen(self.alive, False)
            self.mu = widen(self.mu, 0.0)

    def n_leaves(self) -> np.ndarray:
        return (self.alive & (self.left < 0)).sum(axis=1)

    def tree(self, j: int) -> Tree:
        """Copy of tree ``j``."""
        return Tree(self.var[j].copy(), self.cut[j].copy(), self.cutval[j].copy(),
                    self.left[j].copy(), self.right[j].copy(), self.parent[j].copy(),
                    self.depth[j].copy(), self.alive[j].copy(), self.mu[j].copy())

    def trees(self) -> list:
        return [self.tree(j) for j in range(self.m)]


@dataclass
class ChainState:
    forest: Forest
    sigma2: float
    eta: float
    gamma2: float
    fit: np.ndarray
    pred_fit: np.ndarray
    z: np.ndarray | None
    iteration: int = 0
    accepted: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))


@dataclass(frozen=True)
class PredictionSet:
    """Registered prediction points and their design."""

    t: np.ndarray
    X: np.ndarray
    row_tidx: np.ndarray
    leaf_tidx: np.ndarray
    xbin: np.ndarray

    @property
    def size(self) -> int:
        return int(self.t.size)


def make_prediction_set(model: Model, t=None, X=None) -> PredictionSet:
    if t is None:
        empty = np.zeros(0, dtype=np.int64)
        return PredictionSet(np.zeros(0), np.zeros((0, 0)), empty, empty,
                             np.zeros((0, model.xbin.shape[1]), dtype=np.int64))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tidx, leaf, xb = model.design(t, X)
    return PredictionSet(t, X, tidx, leaf, xb)


def truncated_normal_positive(mean, rng: np.random.Generator) -> np.ndarray:
    """Draw ``N(mean, 1)`` truncated to ``[0, inf)``, elementwise.

    Inverse CDF when the standardized bound ``-mean`` is below 5; beyond
    that, exponential-proposal rejection with the optimal rate, which
    stays efficient arbitrarily far in the tail.
    """
    mean = np.asarray(mean, dtype=float)
    b = -mean
    out = np.empty_like(mean)
    body = b < TAIL_CUTOFF
    u = 1.0 - rng.random(int(body.sum()))  # in (0, 1]
    out[body] = mean[body] - ndtri(u * ndtr(mean[body]))
    tail = np.flatnonzero(~body)
    while tail.size:
        bt = b[tail]
        rate = 0.5 * (bt + np.sqrt(bt * bt + 4.0))
        x = bt + rng.standard_exponential(tail.size) / rate
        ok = rng.random(tail.size) <= np.exp(-0.5 * (x - rate) ** 2)
        out[tail[ok]] = mean[tail[ok]] + x[ok]
        tail = tail[~ok]
    return np.maximum(out, 0.0)


def sample_latents(mean, event, rng: np.random.Generator) -> np.ndarray:
    """Probit latents: ``z >= 0`` where ``event == 1`` and ``z < 0`` elsewhere."""
    mean = np.asarray(mean, dtype=float)
    sign = np.where(np.asarray(event) > 0.5, 1.0, -1.0)
    z = sign * truncated_normal_positive(sign * mean, rng)
    # keep the strict upper bound for non-events
    return np.where((sign < 0) & (z == 0.0), -np.finfo(float).tiny, z)


def sample_sigma2(resid, lam: float, nu: float, rng: np.random.Generator,
                  extra_df: int = 0) -> float:
    """Draw ``(nu lam + RSS) / chi2(nu + N + extra_df)``."""
    resid = np.asarray(resid, dtype=float)
    rss = float(resid @ resid)
    return (nu * lam + rss) / rng.chisquare(nu + resid.size + extra_df)


def sample_eta_gamma(target, fit, sigma2: float, gamma2: float, tau0: float,
                     rng: np.random.Generator):
    """Draw ``eta`` from its normal conditional, then ``gamma2 | eta``.

    ``eta | . ~ N(v (tau0 / gamma2 + S_rf / sigma2), v)`` with
    ``v = 1 / (1 / gamma2 + S_ff / sigma2)``, and
    ``gamma2 | eta ~ IG(1, ((eta - tau0)^2 + 1) / 2)``.
    """
    fit = np.asarray(fit, dtype=float)
    s_ff = float(fit @ fit)
    s_rf = float(np.asarray(target, dtype=float) @ fit)
    v = 1.0 / (1.0 / gamma2 + s_ff / sigma2)
    mean = v * (tau0 / gamma2 + s_rf / sigma2)
    eta = mean + math.sqrt(v) * rng.standard_normal()
    gamma2 = 0.5 * ((eta - tau0) ** 2 + 1.0) / rng.standard_gamma(1.0)
    return float(eta), float(gamma2)


def partial_residual(model: Model, state: ChainState, j: int) -> np.ndarray:
    """Residual handed to tree ``j``, already divided by ``eta``."""
    f = state.forest
    g = f.mu[j][f.leaf_of_row[j], model.leaf_tidx]
    return working_target(model, state) / state.eta - (state.fit - g)


def working_target(model: Model, state: ChainState) -> np.ndarray:
    w = state.z if model.probit else model.response
    return w - model.alpha.at(model.row_tidx)


def pointwise_loglik(model_kind: str, y, mean, sigma2: float) -> np.ndarray:
    if model_kind == "continuous":
        return -0.5 * (LOG_2PI + math.log(sigma2)) - (y - mean) ** 2 / (2.0 * sigma2)
    return np.where(y > 0.5, log_ndtr(mean), log_ndtr(-mean))


def init_state(model: Model, rng: np.random.Generator, preds: PredictionSet | None = None,
               cfg: FitConfig | None = None) -> ChainState:
    """Stumps with zero leaf functions, ``eta = tau0`` and ``sigma2 = sigma_hat**2``."""
    n_pred = 0 if preds is None else preds.size
    forest = Forest(model.m, model.n, n_pred, model.leaf_size)
    sigma2 = 1.0 if model.probit else model.sigma_hat**2
    eta = model.tau0
    if cfg is not None:
        if cfg.fixed_sigma2 is not None and not model.probit:
            sigma2 = float(cfg.fixed_sigma2)
        if cfg.fixed_eta is not None:
            eta = float(cfg.fixed_eta)
    z = None
    if model.probit:
        z = sample_latents(model.alpha.at(model.row_tidx), model.response, rng)
    return ChainState(forest, float(sigma2), float(eta), 1.0, np.zeros(model.n),
                      np.zeros(n_pred), z)


def backfit_iteration(model: Model, state: ChainState, rng: np.random.Generator,
                      cfg: FitConfig, preds: PredictionSet | None = None) -> ChainState:
    """One full sweep: all trees, then ``sigma2``, ``eta``/``gamma2`` and latents, in place."""
    f = state.forest
    f.ensure_free(2)
    T = model.leaf_size
    n_leaf_cap = int(f.n_leaves().max()) + 1
    U = rng.random((model.m, 5))
    Z = rng.standard_normal((model.m, n_leaf_cap, 2 * T))
    moves = np.zeros(model.m, dtype=np.int64)
    target = np.ascontiguousarray(working_target(model, state))
    if preds is None:
        preds = make_prediction_set(model)
    cp = model.cutpoints
    tp = model.tree_prior
    ok = K.sweep(f.var, f.cut, f.cutval, f.left, f.right, f.parent, f.depth, f.alive, f.mu,
                 f.leaf_of_row, f.leaf_of_pred, model.xbin, model.leaf_tidx,
                 preds.xbin, preds.leaf_tidx, target, state.eta, state.sigma2,
                 state.fit, state.pred_fit, model.leaf_prior.Sigma0, model.leaf_prior.chol,
                 cp.split_vars, cp.n_cuts, cp.offsets, cp.flat,
                 tp.alpha, tp.beta, int(tp.n_min), bool(cfg.allow_grow), U, Z, moves)
    if not ok:
        err = NumericalError(f"leaf update failed at iteration {state.iteration}")
        err.state = state
        raise err
    state.accepted += np.bincount(moves, minlength=3)[:3]

    if not model.probit and cfg.fixed_sigma2 is None:
        state.sigma2 = sample_sigma2(target - state.eta * state.fit, model.lam, model.nu, rng,
                                     cfg.sigma2_extra_df)
    if cfg.fixed_eta is None:
        state.eta, state.gamma2 = sample_eta_gamma(target, state.fit, state.sigma2,
                                                   state.gamma2, model.tau0, rng)
    if model.probit:
        mean = model.alpha.at(model.row_tidx) + state.eta * state.fit
        state.z = sample_latents(mean, model.response, rng)
    state.iteration += 1
    if cfg.audit_every and state.iteration % cfg.audit_every == 0:
        audit_fit(model, state)
    return state


def audit_fit(model: Model, state: ChainState, tol: float = 1e-8) -> None:
    """Check the cached fit against a full recomputation and resynchronize it."""
    f = state.forest
    exact = K.forest_sum(f.mu, f.leaf_of_row, model.leaf_tidx)
    dev = float(np.max(np.abs(exact - state.fit))) if exact.size else 0.0
    if dev > tol:
        err = NumericalError(f"cached fit drifted by {dev:.3g} at iteration {state.iteration}")
        err.state = state
        raise err
    state.fit[:] = exact


# --- posterior draws -------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Retained draws of one chain.

    ``pred_latent`` holds ``alpha(t) + eta f(t, x)`` at the registered
    prediction points, one row per draw; ``loglik`` is the pointwise
    log-likelihood of the fitted rows (person-period rows for survival).
    """

    kind: str
    mode: str
    grid: TimeGrid
    alpha: np.ndarray
    sigma2: np.ndarray
    eta: np.ndarray
    gamma2: np.ndarray
    loglik_total: np.ndarray
    loglik: np.ndarray | None
    pred_t: np.ndarray
    pred_X: np.ndarray
    pred_latent: np.ndarray
    seed: int
    length_scale: float
    acceptance: dict
    trees: list | None = None
    elapsed: float = 0.0

    @property
    def n_draws(self) -> int:
        return int(self.sigma2.size)

    @property
    def probit(self) -> bool:
        return self.kind != "continuous"

    def pred_response(self) -> np.ndarray:
        """Prediction draws on the response scale (probabilities for probit models)."""
        return ndtr(self.pred_latent) if self.probit else self.pred_latent


def run_chain(dataset: Dataset, cfg: FitConfig, predict_at=None, *, model: Model | None = None,
              rng: np.random.Generator | None = None) -> PosteriorDraws:
    """Run one chain and keep ``n_draws`` states after ``n_burn`` warm-up iterations.

    Parameters
    ----------
    dataset : Dataset
    cfg : FitConfig
    predict_at : tuple of (t, X), optional
        Points at which ``alpha(t) + eta f(t, x)`` is recorded every draw.
    model : Model, optional
        Prebuilt model, e.g. with overridden priors.
    rng : numpy.random.Generator, optional
        Defaults to ``numpy.random.default_rng(cfg.seed)``.
    """
    start = time.perf_counter()
    if model is None:
        model = build_model(dataset, cfg)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    preds = make_prediction_set(model, *(predict_at or (None, None)))
    state = init_state(model, rng, preds, cfg)

    n_keep = cfg.n_draws
    sigma2 = np.empty(n_keep)
    eta = np.empty(n_keep)
    gamma2 = np.empty(n_keep)
    ll_total = np.empty(n_keep)
    loglik = np.empty((n_keep, model.n)) if cfg.keep_loglik else None
    pred_latent = np.empty((n_keep, preds.size))
    trees = [] if cfg.keep_trees else None
    alpha_rows = model.alpha.at(model.row_tidx)
    alpha_pred = model.alpha.at(preds.row_tidx)

    total = cfg.n_burn + cfg.n_draws * cfg.thin
    kept = 0
    for it in range(total):
        backfit_iteration(model, state, rng, cfg, preds)
        if it < cfg.n_burn or (it - cfg.n_burn + 1) % cfg.thin:
            continue
        mean = alpha_rows + state.eta * state.fit
        ll = pointwise_loglik(model.kind, model.response, mean, state.sigma2)
        sigma2[kept] = state.sigma2
        eta[kept] = state.eta
        gamma2[kept] = state.gamma2
        ll_total[kept] = ll.sum()
        if loglik is not None:
            loglik[kept] = ll
        pred_latent[kept] = alpha_pred + state.eta * state.pred_fit
        if trees is not None:
            trees.append(dump_trees(state.forest.trees()))
        kept += 1

    moves = state.accepted
    acceptance = {"grow": int(moves[1]), "prune": int(moves[2]),
                  "tree_steps": int(total * model.m)}
    logger.debug("chain finished: %d iterations, %s", total, acceptance)
    return PosteriorDraws(
        kind=model.kind, mode=model.mode, grid=model.grid, alpha=model.alpha.alpha.copy(),
        sigma2=sigma2, eta=eta, gamma2=gamma2, loglik_total=ll_total, loglik=loglik,
        pred_t=preds.t, pred_X=preds.X, pred_latent=pred_latent, seed=cfg.seed,
        length_scale=model.leaf_prior.spec.length_scale, acceptance=acceptance,
        trees=trees, elapsed=time.perf_counter() - start,
    )


@dataclass(frozen=True)
class PredictionSummary:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def summarize(values, level: float = 0.95) -> PredictionSummary:
    """Draw mean and equal-tailed interval (linear-interpolation quantiles) per column."""
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    values = np.asarray(values, dtype=float)
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(values, [tail, 1.0 - tail], axis=0)
    return PredictionSummary(values.mean(axis=0), lo, hi, level)


def predict(draws: PosteriorDraws, t=None, X=None, level: float = 0.95) -> PredictionSummary:
    """Posterior mean and credible interval of the regression or hazard function.

    Without ``t``/``X`` the registered prediction points are summarized.
    Other points can be evaluated only if the chain kept its trees.
    """
    if t is None and X is None:
        return summarize(draws.pred_response(), level)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tidx = draws.grid.index_of(t)
    if draws.trees is None:
        raise ConfigError("these draws only cover their registered points; refit with keep_trees")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    S = np.column_stack([X, t]) if draws.mode == "vanilla_bart" else X
    leaf_t = tidx if draws.mode == "tsbart" else np.zeros_like(tidx)
    latent = np.empty((draws.n_draws, t.size))
    for d, text in enumerate(draws.trees):
        f = sum(tree.evaluate(S, leaf_t) for tree in load_trees(text))
        latent[d] = draws.alpha[tidx] + draws.eta[d] * f
    return summarize(ndtr(latent) if draws.probit else latent, level)


def rescale_hazard(h, control_fraction: float):
    """Population hazard from one fit to case-control data: odds times ``control_fraction``."""
    if not 0.0 < control_fraction <= 1.0:
        raise ConfigError(f"control_fraction must be in (0, 1], got {control_fraction}")
    h = np.asarray(h, dtype=float)
    if np.any(h >= 1.0) or np.any(h < 0.0):
        raise DataError("hazard must lie in [0, 1); odds are undefined at 1")
    odds = h / (1.0 - h) * control_fraction
    out = odds / (1.0 + odds)
    return float(out) if out.ndim == 0 else out


# --- output files ------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def write_scalars(draws: PosteriorDraws, path) -> None:
    """CSV with columns ``draw, sigma2, eta, gamma2, loglik``."""
    with open(path, "w", newline="") as fh:
        fh.write("draw,sigma2,eta,gamma2,loglik\n")
        for d in range(draws.n_draws):
            fh.write(f"{d},{_fmt(draws.sigma2[d])},{_fmt(draws.eta[d])},"
                     f"{_fmt(draws.gamma2[d])},{_fmt(draws.loglik_total[d])}\n")


def write_predictions(draws: PosteriorDraws, path) -> None:
    """Long CSV ``draw, point, t, value``; ``value`` is on the response scale."""
    values = draws.pred_response()
    with open(path, "w", newline="") as fh:
        fh.write("draw,point,t,value\n")
        for d in range(values.shape[0]):
            for k in range(values.shape[1]):
                fh.write(f"{d},{k},{_fmt(draws.pred_t[k])},{_fmt(values[d, k])}\n")


def write_trees(draws: PosteriorDraws, path) -> None:
    if draws.trees is None:
        raise ConfigError("trees were not kept for these draws")
    with open(path, "w") as fh:
        for d, text in enumerate(draws.trees):
            fh.write(f"# draw {d}\n{text}")


def with_response(model: Model, response) -> Model:
    """The same model with a different response vector (used for prior simulation)."""
    return replace(model, response=np.ascontiguousarray(response, dtype=float))
