"""Decision trees whose leaves carry functions over the time grid.

A tree partitions covariate space with axis-aligned rules ``x[j] < c``
(ties go right). Each leaf holds a vector over the time grid. This module
provides the depth-penalising tree prior, grow/prune Metropolis-Hastings
moves, the closed-form leaf marginal likelihood and conjugate leaf draws,
plus a plain-text serialization of trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .exceptions import ConfigError, DataError, NumericalError
from .kernel import LeafPrior

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TreePriorConfig:
    """Split probability ``alpha * (1 + depth) ** -beta`` and minimum leaf size."""

    alpha: float = 0.95
    beta: float = 2.0
    n_min: int = 5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"tree prior alpha must be in (0, 1), got {self.alpha}")
        if not self.beta >= 0.0:
            raise ConfigError(f"tree prior beta must be >= 0, got {self.beta}")
        if int(self.n_min) < 1:
            raise ConfigError(f"n_min must be >= 1, got {self.n_min}")


def split_prob(depth: int, cfg: TreePriorConfig) -> float:
    """Prior probability that a node at ``depth`` is internal."""
    if depth < 0:
        raise ConfigError("depth must be >= 0")
    return cfg.alpha * (1.0 + depth) ** (-cfg.beta)


@dataclass(frozen=True)
class SplitRule:
    covariate_index: int
    cutpoint: float

    def goes_left(self, x) -> bool:
        return bool(x[self.covariate_index] < self.cutpoint)


@dataclass(frozen=True)
class LeafFunction:
    mu: np.ndarray


@dataclass(frozen=True)
class LeafStats:
    """Per-grid-value count, residual sum and residual sum of squares of one leaf."""

    n: np.ndarray
    r: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float)
        r = np.asarray(self.r, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if not (n.shape == r.shape == q.shape and n.ndim == 1):
            raise DataError("LeafStats arrays must be 1-D with equal length")
        if np.any(n < 0):
            raise DataError("LeafStats counts must be >= 0")
        if np.any((n == 0) & ((r != 0) | (q != 0))):
            raise DataError("empty grid cells must have zero residual sums")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_residuals(cls, resid, tidx, n_grid: int) -> "LeafStats":
        resid = np.asarray(resid, dtype=float)
        tidx = np.asarray(tidx)
        return cls(
            np.bincount(tidx, minlength=n_grid).astype(float),
            np.bincount(tidx, weights=resid, minlength=n_grid),
            np.bincount(tidx, weights=resid**2, minlength=n_grid),
        )

    @classmethod
    def empty(cls, n_grid: int) -> "LeafStats":
        z = np.zeros(n_grid)
        return cls(z, z, z)


class Cutpoints:
    """Candidate cutpoints per covariate.

    Covariates with at most ``max_cuts + 1`` distinct values split at the
    midpoints between consecutive values; others at up to ``max_cuts``
    equally spaced interior quantiles, deduplicated. Constant covariates
    get no cutpoints and are never proposed for splitting.
    """

    def __init__(self, cuts):
        self.cuts = [np.ascontiguousarray(c, dtype=float) for c in cuts]
        for c in self.cuts:
            if c.ndim != 1 or np.any(np.diff(c) <= 0):
                raise DataError("cutpoints must be strictly increasing 1-D arrays")
        self.n_cuts = np.array([c.size for c in self.cuts], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.n_cuts)[:-1]]).astype(np.int64)
        self.flat = np.concatenate(self.cuts) if self.cuts else np.zeros(0)
        self.split_vars = np.flatnonzero(self.n_cuts > 0).astype(np.int64)

    @classmethod
    def from_data(cls, X, max_cuts: int = 100) -> "Cutpoints":
        X = np.asarray(X, dtype=float)
        cuts = []
        for j in range(X.shape[1]):
            values = np.unique(X[:, j])
            if values.size <= 1:
                cuts.append(np.zeros(0))
            elif values.size - 1 <= max_cuts:
                cuts.append(0.5 * (values[:-1] + values[1:]))
            else:
                probs = np.linspace(0.0, 1.0, max_cuts + 2)[1:-1]
                cuts.append(np.unique(np.quantile(X[:, j], probs)))
        return cls(cuts)

    @property
    def p(self) -> int:
        return len(self.cuts)

    def bin(self, X) -> np.ndarray:
        """Number of cutpoints ``<=`` each value, so ``x < cuts[c]`` iff ``bin <= c``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise DataError(f"expected {self.p} covariates, got {X.shape[1]}")
        out = np.empty(X.shape, dtype=np.int64)
        for j, c in enumerate(self.cuts):
            out[:, j] = np.searchsorted(c, X[:, j], side="right")
        return out


@dataclass
class SplitIndex:
    """Binned covariates of the rows a tree is fit to."""

    cutpoints: Cutpoints
    xbin: np.ndarray

    @classmethod
    def from_data(cls, X, max_cuts: int = 100) -> "SplitIndex":
        cp = Cutpoints.from_data(X, max_cuts)
        return cls(cp, cp.bin(X))


class Tree:
    """A binary tree stored as flat node arrays.

    Node 0 is the root; ``left[k] < 0`` marks a leaf. Freed nodes are
    marked dead in ``alive`` and reused. ``mu[k]`` is the leaf function of
    leaf ``k`` over the time grid.
    """

    _int_fields = ("var", "cut", "left", "right", "parent", "depth")

    def __init__(self, var, cut, cutval, left, right, parent, depth, alive, mu):
        self.var = var
        self.cut = cut
        self.cutval = cutval
        self.left = left
        self.right = right
        self.parent = parent
        self.depth = depth
        self.alive = alive
        self.mu = mu

    @classmethod
    def stump(cls, n_grid: int, capacity: int = 8) -> "Tree":
        full = lambda v: np.full(capacity, v, dtype=np.int64)  # noqa: E731
        tree = cls(
            full(-1), full(-1), np.full(capacity, np.nan), full(-1), full(-1), full(-1),
            np.zeros(capacity, dtype=np.int64), np.zeros(capacity, dtype=bool),
            np.zeros((capacity, n_grid)),
        )
        tree.alive[0] = True
        return tree

    @property
    def capacity(self) -> int:
        return int(self.left.size)

    @property
    def n_grid(self) -> int:
        return int(self.mu.shape[1])

    def ensure_capacity(self, free: int = 2) -> None:
        if self.capacity - int(self.alive.sum()) >= free:
            return
        extra = max(self.capacity, free)
        for name in self._int_fields:
            fill = 0 if name == "depth" else -1
            arr = getattr(self, name)
            setattr(self, name, np.concatenate([arr, np.full(extra, fill, dtype=np.int64)]))
        self.cutval = np.concatenate([self.cutval, np.full(extra, np.nan)])
        self.alive = np.concatenate([self.alive, np.zeros(extra, dtype=bool)])
        self.mu = np.concatenate([self.mu, np.zeros((extra, self.n_grid))])

    def copy(self) -> "Tree":
        return Tree(*(getattr(self, f).copy() for f in
                      ("var", "cut", "cutval", "left", "right", "parent", "depth", "alive", "mu")))

    def leaves(self) -> np.ndarray:
        return K.leaf_ids(self.left, self.alive)

    @property
    def n_leaves(self) -> int:
        return int(self.leaves().size)

    def prunable(self) -> np.ndarray:
        return K.nog_ids(self.left, self.right, self.alive)

    def rule(self, k: int) -> SplitRule:
        if self.left[k] < 0:
            raise DataError(f"node {k} is a leaf")
        return SplitRule(int(self.var[k]), float(self.cutval[k]))

    def leaf_function(self, k: int) -> LeafFunction:
        if self.left[k] >= 0 or not self.alive[k]:
            raise DataError(f"node {k} is not a leaf")
        return LeafFunction(self.mu[k].copy())

    def max_depth(self) -> int:
        return int(self.depth[self.alive].max())

    def skeleton(self) -> tuple:
        """Hashable description of the split structure, independent of node numbering."""

        def walk(k):
            if self.left[k] < 0:
                return None
            return (int(self.var[k]), int(self.cut[k]), walk(self.left[k]), walk(self.right[k]))

        return walk(0)

    def evaluate(self, X, tidx) -> np.ndarray:
        """Leaf-function values at raw covariate rows ``X`` and grid indices ``tidx``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        leaves = np.array([assign_leaf(self, x) for x in X], dtype=np.int64)
        return self.mu[leaves, np.asarray(tidx)]

    def log_prior(self, cfg: TreePriorConfig, cutpoints: Cutpoints) -> float:
        """Log tree prior: depth-dependent split probabilities times uniform rule choices."""
        q = cutpoints.split_vars.size
        total = 0.0
        for k in np.flatnonzero(self.alive):
            pd = split_prob(int(self.depth[k]), cfg)
            if self.left[k] < 0:
                total += math.log1p(-pd)
            else:
                v = int(self.var[k])
                lo, hi = K.cut_bounds(k, v, self.var, self.cut, self.left, self.parent,
                                      cutpoints.n_cuts[v])
                total += math.log(pd) - math.log(q) - math.log(hi - lo - 1)
        return total


def assign_leaf(tree: Tree, x) -> int:
    """Leaf reached by covariate vector ``x``."""
    k = 0
    while tree.left[k] >= 0:
        k = tree.left[k] if x[tree.var[k]] < tree.cutval[k] else tree.right[k]
    return int(k)


def route_rows(tree: Tree, xbin) -> np.ndarray:
    """Leaf of every binned row."""
    out = np.empty(xbin.shape[0], dtype=np.int64)
    K.route_all(tree.var, tree.cut, tree.left, tree.right, np.ascontiguousarray(xbin), out)
    return out


# --- leaf likelihood and conditional -----------------------------------------


def leaf_log_marginal(stats: LeafStats, sigma2: float, prior: LeafPrior) -> float:
    """Log of the Gaussian likelihood of a leaf's residuals integrated over its function.

    Uses ``B = I + S Sigma0 S`` with ``S = diag(sqrt(n_s / sigma2))``, which
    equals the determinant term ``det(I + Sigma0 Lambda)`` and avoids
    inverting the prior covariance.
    """
    if not sigma2 > 0:
        raise ConfigError(f"sigma2 must be positive, got {sigma2}")
    core = K.logml_core(stats.n, stats.r, float(sigma2), prior.Sigma0)
    if not math.isfinite(core):
        raise NumericalError("leaf marginal likelihood factorization failed")
    N = stats.n.sum()
    return float(-0.5 * N * (LOG_2PI + math.log(sigma2)) - stats.q.sum() / (2.0 * sigma2) + core)


def leaf_posterior(stats: LeafStats, sigma2: float, prior: LeafPrior):
    """Mean and covariance of a leaf function given its residual statistics."""
    mean, cov = K.posterior_moments(stats.n, stats.r, float(sigma2), prior.Sigma0)
    if not np.all(np.isfinite(mean)):
        raise NumericalError("leaf posterior factorization failed")
    return mean, cov


def sample_leaf_function(stats: LeafStats, sigma2: float, prior: LeafPrior,
                         rng: np.random.Generator) -> LeafFunction:
    """Draw a leaf function from its Gaussian full conditional."""
    if not sigma2 > 0:
        raise ConfigError(f"sigma2 must be positive, got {sigma2}")
    T = prior.size
    z = rng.standard_normal(2 * T)
    out = np.empty(T)
    if not K.sample_mu(stats.n, stats.r, float(sigma2), prior.Sigma0, prior.chol,
                       z[:T], z[T:], out):
        raise NumericalError("leaf posterior factorization failed")
    return LeafFunction(out)


# --- grow / prune --------------------------------------------------------------


@dataclass(frozen=True)
class GrowProposal:
    leaf: int
    rule: SplitRule
    cut_index: int
    n_left: int
    n_right: int
    log_proposal_ratio: float
    log_prior_ratio: float


@dataclass(frozen=True)
class PruneProposal:
    node: int
    log_proposal_ratio: float
    log_prior_ratio: float


def propose_grow(tree: Tree, index: SplitIndex, leaf_of_row, cfg: TreePriorConfig,
                 rng: np.random.Generator) -> GrowProposal | None:
    """Propose splitting a uniformly chosen leaf on a uniform covariate and cutpoint.

    Returns None (an outright rejection) when the drawn covariate has no
    cutpoint left at that leaf or a child would hold fewer than ``n_min``
    rows.
    """
    u = rng.random(3)
    cp = index.cutpoints
    ok, h, v, c, log_prop, log_prior = K.propose_grow(
        tree.left, tree.right, tree.parent, tree.var, tree.cut, tree.depth, tree.alive,
        cp.split_vars, cp.n_cuts, cfg.alpha, cfg.beta, u[0], u[1], u[2])
    if not ok:
        return None
    in_leaf = np.asarray(leaf_of_row) == h
    goes_left = index.xbin[in_leaf, v] <= c
    n_left = int(goes_left.sum())
    n_right = int(goes_left.size - n_left)
    if n_left < cfg.n_min or n_right < cfg.n_min:
        return None
    return GrowProposal(int(h), SplitRule(int(v), float(cp.cuts[v][c])), int(c),
                        n_left, n_right, float(log_prop), float(log_prior))


def propose_prune(tree: Tree, cfg: TreePriorConfig, rng: np.random.Generator) -> PruneProposal | None:
    """Propose collapsing a uniformly chosen node whose children are both leaves."""
    u = rng.random()
    ok, k, log_prop, log_prior = K.propose_prune(tree.left, tree.right, tree.alive, tree.depth,
                                                 cfg.alpha, cfg.beta, u)
    if not ok:
        return None
    return PruneProposal(int(k), float(log_prop), float(log_prior))


def apply_grow(tree: Tree, proposal: GrowProposal, index: SplitIndex, leaf_of_row) -> None:
    """Split ``proposal.leaf`` in place; ``leaf_of_row`` is updated in place."""
    tree.ensure_capacity(2)
    empty = np.zeros(0, dtype=np.int64)
    K.apply_grow(proposal.leaf, proposal.rule.covariate_index, proposal.cut_index,
                 proposal.rule.cutpoint, tree.var, tree.cut, tree.cutval, tree.left, tree.right,
                 tree.parent, tree.depth, tree.alive, tree.mu, leaf_of_row, index.xbin,
                 empty, np.zeros((0, index.xbin.shape[1]), dtype=np.int64))


def apply_prune(tree: Tree, proposal: PruneProposal, leaf_of_row) -> None:
    empty = np.zeros(0, dtype=np.int64)
    K.apply_prune(proposal.node, tree.var, tree.cut, tree.cutval, tree.left, tree.right,
                  tree.alive, leaf_of_row, empty)


def mh_tree_step(tree: Tree, index: SplitIndex, leaf_of_row, resid, tidx, sigma2: float,
                 prior: LeafPrior, cfg: TreePriorConfig, rng: np.random.Generator,
                 allow_grow: bool = True) -> int:
    """One grow-or-prune Metropolis-Hastings step with leaf functions integrated out.

    Grow and prune are each chosen with probability 1/2. Returns 1 after an
    accepted grow, 2 after an accepted prune and 0 otherwise. ``tree`` and
    ``leaf_of_row`` are modified in place.
    """
    tree.ensure_capacity(2)
    cp = index.cutpoints
    u = rng.random(5)
    empty = np.zeros(0, dtype=np.int64)
    code = K.mh_step(tree.var, tree.cut, tree.cutval, tree.left, tree.right, tree.parent,
                     tree.depth, tree.alive, tree.mu, leaf_of_row, index.xbin,
                     np.asarray(tidx, dtype=np.int64), np.asarray(resid, dtype=float),
                     float(sigma2), prior.Sigma0, empty,
                     np.zeros((0, index.xbin.shape[1]), dtype=np.int64),
                     cp.split_vars, cp.n_cuts, cp.offsets, cp.flat,
                     cfg.alpha, cfg.beta, int(cfg.n_min), bool(allow_grow), u)
    if code < 0:
        raise NumericalError("leaf marginal likelihood factorization failed")
    return int(code)


# --- serialization ---------------------------------------------------------------


def dump_tree(tree: Tree) -> str:
    """Flat node-list text; floats use ``repr`` so reloading is exact.

    Lines are ``node parent depth split var cut_index cutpoint`` for internal
    nodes and ``node parent depth leaf mu_0 ... mu_{T-1}`` for leaves,
    after a header ``tree <n_nodes> <n_grid>``.
    """
    nodes = np.flatnonzero(tree.alive)
    lines = [f"tree {nodes.size} {tree.n_grid}"]
    for k in nodes:
        head = f"{k} {tree.parent[k]} {tree.depth[k]}"
        if tree.left[k] >= 0:
            lines.append(f"{head} split {tree.var[k]} {tree.cut[k]} {float(tree.cutval[k])!r}")
        else:
            lines.append(f"{head} leaf " + " ".join(repr(float(v)) for v in tree.mu[k]))
    return "\n".join(lines)


def load_tree(text: str) -> Tree:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "tree" or len(head) != 3:
        raise DataError(f"bad tree header {lines[0]!r}")
    n_nodes, n_grid = int(head[1]), int(head[2])
    rows = [ln.split() for ln in lines[1:1 + n_nodes]]
    if len(rows) != n_nodes:
        raise DataError("truncated tree record")
    cap = max(int(r[0]) for r in rows) + 1
    tree = Tree.stump(n_grid, capacity=max(cap, 1))
    tree.alive[:] = False
    for r in rows:
        k, parent, depth = int(r[0]), int(r[1]), int(r[2])
        tree.alive[k] = True
        tree.parent[k] = parent
        tree.depth[k] = depth
        if r[3] == "split":
            tree.var[k] = int(r[4])
            tree.cut[k] = int(r[5])
            tree.cutval[k] = float(r[6])
        elif r[3] == "leaf":
            mu = [float(v) for v in r[4:]]
            if len(mu) != n_grid:
                raise DataError(f"leaf {k} has {len(mu)} values, expected {n_grid}")
            tree.mu[k] = mu
        else:
            raise DataError(f"unknown node kind {r[3]!r}")
    for k in np.flatnonzero(tree.alive):
        p = tree.parent[k]
        if p >= 0:
            if tree.left[p] < 0:
                tree.left[p] = k
            else:
                tree.right[p] = k
    # children were attached in id order; restore left/right by the parent's rule
    for k in np.flatnonzero(tree.alive & (tree.left >= 0)):
        a, b = tree.left[k], tree.right[k]
        if a > b:
            tree.left[k], tree.right[k] = b, a
    return tree


def dump_trees(trees) -> str:
    return "\n".join(dump_tree(t) for t in trees) + "\n"


def load_trees(text: str) -> list:
    blocks, current = [], []
    for ln in text.splitlines():
        if ln.startswith("#"):
            continue
        if ln.startswith("tree ") and current:
            blocks.append("\n".join(current))
            current = []
        if ln.strip():
            current.append(ln)
    if current:
        blocks.append("\n".join(current))
    return [load_tree(b) for b in blocks]
