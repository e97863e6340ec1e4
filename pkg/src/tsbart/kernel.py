"""Squared-exponential leaf prior over the time grid.

The length scale can be given directly or through the expected number of
zero crossings ``kappa`` of a leaf function over the range of ``t``:
``l = t_range / (pi * kappa)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .data import TimeGrid
from .exceptions import ConfigError, NumericalError

JITTER_START = 1e-8
JITTER_MAX = 1e-4


def length_scale_from_crossings(t_range: float, kappa: float) -> float:
    """Length scale whose expected number of mean crossings over ``t_range`` is ``kappa``."""
    if not (t_range > 0 and math.isfinite(t_range)):
        raise ConfigError(f"t_range must be positive and finite, got {t_range}")
    if not (kappa > 0 and math.isfinite(kappa)):
        raise ConfigError(f"kappa must be positive and finite, got {kappa}")
    return t_range / (math.pi * kappa)


def expected_crossings(t_range: float, length_scale: float) -> float:
    """Kratz's expected crossings ``t_range * sqrt(-r''(0)) / pi``.

    For the squared-exponential correlation ``r(s) = exp(-s^2 / (2 l^2))``,
    ``r''(0) = -1 / l^2``.
    """
    if not (length_scale > 0):
        raise ConfigError(f"length_scale must be positive, got {length_scale}")
    curvature = 1.0 / length_scale**2
    return t_range * math.sqrt(curvature) / math.pi


@dataclass(frozen=True)
class KernelSpec:
    length_scale: float
    marginal_variance: float

    def __post_init__(self):
        for name in ("length_scale", "marginal_variance"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive and finite, got {v}")


def squared_exponential(a, b, spec: KernelSpec) -> np.ndarray:
    """Covariance matrix between target values ``a`` and ``b``."""
    d = np.subtract.outer(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return spec.marginal_variance * np.exp(-0.5 * (d / spec.length_scale) ** 2)


@dataclass(frozen=True)
class LeafPrior:
    """Zero-mean Gaussian prior of a leaf function on the grid.

    Attributes
    ----------
    Sigma0 : (T, T) ndarray
        Prior covariance, jitter included.
    K : (T, T) ndarray
        Precision matrix, the inverse of ``Sigma0``.
    chol : (T, T) ndarray
        Lower Cholesky factor of ``Sigma0``.
    log_det_Sigma0 : float
    jitter : float
        Diagonal jitter actually added.
    """

    Sigma0: np.ndarray
    K: np.ndarray
    chol: np.ndarray
    log_det_Sigma0: float
    jitter: float
    spec: KernelSpec

    @property
    def size(self) -> int:
        return int(self.Sigma0.shape[0])


def _try_factor(Sigma0):
    try:
        L = np.linalg.cholesky(Sigma0)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(L)):
        return None
    K = cho_solve((L, True), np.eye(Sigma0.shape[0]))
    K = 0.5 * (K + K.T)
    if np.max(np.abs(K @ Sigma0 - np.eye(Sigma0.shape[0]))) > 1e-8:
        return None
    return L, K


def build_leaf_prior(grid: TimeGrid, spec: KernelSpec) -> LeafPrior:
    """Covariance, precision and Cholesky factor of the leaf prior on ``grid``.

    The jitter starts at ``1e-8 * marginal_variance`` and grows tenfold until
    the factorization succeeds and the precision reproduces the identity to
    ``1e-8``; past ``1e-4 * marginal_variance`` a :class:`NumericalError` is
    raised.
    """
    base = squared_exponential(grid.values, grid.values, spec)
    eye = np.eye(grid.size)
    scale = JITTER_START
    while scale <= JITTER_MAX * (1 + 1e-12):
        jitter = scale * spec.marginal_variance
        Sigma0 = base + jitter * eye
        out = _try_factor(Sigma0)
        if out is not None:
            L, K = out
            L.flags.writeable = False
            K.flags.writeable = False
            Sigma0.flags.writeable = False
            return LeafPrior(
                Sigma0=Sigma0,
                K=K,
                chol=L,
                log_det_Sigma0=float(2.0 * np.sum(np.log(np.diag(L)))),
                jitter=jitter,
                spec=spec,
            )
        scale *= 10.0
    raise NumericalError(
        f"leaf prior covariance not factorizable with jitter up to {JITTER_MAX:g}; "
        f"condition number estimate {np.linalg.cond(base):.3g}"
    )
