"""Exact Gaussian-process regression on grid cells with an RBF kernel.

The kernel follows ``sigma0**2 * exp(-|a - b|**2 / (2 * lengthscale))``: the
squared distance is divided by ``2 * lengthscale`` (not ``lengthscale**2``), so
``lengthscale`` is measured in squared cells.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

SIGMA0 = 1.0
NOISE = 1e-5
LENGTHSCALE_BOUNDS = (0.5, 10.0)
VARIANCE_FLOOR = 1e-12
MAX_JITTER = 1e-2
N_GRID = 24
N_GOLDEN = 24

_LOG_2PI = math.log(2.0 * math.pi)
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class GPNumericalError(np.linalg.LinAlgError):
    """The covariance matrix stayed indefinite after jitter escalation."""


class LengthscaleFallbackWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class KernelParams:
    sigma0: float = SIGMA0
    lengthscale: float = LENGTHSCALE_BOUNDS[1]

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")


def sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(-1, 2)
    B = np.asarray(B, dtype=float).reshape(-1, 2)
    return ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)


def rbf(a: Sequence[float], b: Sequence[float], kp: KernelParams) -> float:
    d2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    return kp.sigma0 ** 2 * math.exp(-d2 / (2.0 * kp.lengthscale))


def rbf_matrix(A: np.ndarray, B: np.ndarray, kp: KernelParams) -> np.ndarray:
    return kp.sigma0 ** 2 * np.exp(-sqdist(A, B) / (2.0 * kp.lengthscale))


def dedup(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Collapse repeated locations, keeping the most recent value, first-seen order."""
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float).reshape(-1)
    slot = {}
    keep, vals = [], []
    for i, key in enumerate(map(tuple, X)):
        if key in slot:
            vals[slot[key]] = y[i]
        else:
            slot[key] = len(keep)
            keep.append(i)
            vals.append(y[i])
    if len(keep) == len(X):
        return X, y
    return X[keep], np.asarray(vals)


def cholesky_jitter(K: np.ndarray, noise: float) -> Tuple[np.ndarray, float]:
    """Cholesky factor of ``K + noise**2 I``; noise variance escalates x10 up to 1e-2."""
    n = len(K)
    nv = noise ** 2
    while True:
        try:
            return np.linalg.cholesky(K + nv * np.eye(n)), nv
        except np.linalg.LinAlgError:
            if nv >= MAX_JITTER * (1 - 1e-9):
                cond = np.linalg.cond(K)
                raise GPNumericalError(
                    f"covariance not positive definite with noise variance {nv:.3g} "
                    f"(condition number {cond:.3g})") from None
            nv = min(nv * 10.0, MAX_JITTER)


def _solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)


def predict(X: np.ndarray, y: np.ndarray, kp: KernelParams, noise: float,
            queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-mean posterior mean and variance at ``queries``."""
    Q = np.asarray(queries, dtype=float).reshape(-1, 2)
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    prior = kp.sigma0 ** 2
    if len(X) == 0:
        return np.zeros(len(Q)), np.full(len(Q), prior)
    L, _ = cholesky_jitter(rbf_matrix(X, X, kp), noise)
    return _posterior(L, X, np.asarray(y, dtype=float).reshape(-1), kp, Q)


def _posterior(L, X, y, kp, Q):
    Ks = rbf_matrix(Q, X, kp)
    mean = Ks @ _solve(L, y)
    v = solve_triangular(L, Ks.T, lower=True)
    var = kp.sigma0 ** 2 - np.einsum("ij,ij->j", v, v)
    return mean, np.clip(var, VARIANCE_FLOOR, kp.sigma0 ** 2)


def log_marginal_likelihood(X: np.ndarray, y: np.ndarray, kp: KernelParams,
                            noise: float) -> float:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) == 0:
        raise ValueError("log marginal likelihood needs at least one sample")
    return _lml_from_d2(sqdist(X, X), y, kp.sigma0, kp.lengthscale, noise)


def _lml_from_d2(D2, y, sigma0, lengthscale, noise):
    K = sigma0 ** 2 * np.exp(-D2 / (2.0 * lengthscale))
    L, _ = cholesky_jitter(K, noise)
    a = solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * _LOG_2PI)


def _lml_batch(D2, y, sigma0, lengthscales, noise):
    """Log marginal likelihood at many lengthscales with one stacked Cholesky.

    Returns None when any matrix needs jitter beyond ``noise``; the caller then
    scores point by point so escalation follows :func:`cholesky_jitter`.
    """
    ls = np.asarray(lengthscales, dtype=float)[:, None, None]
    K = sigma0 ** 2 * np.exp(-D2[None] / (2.0 * ls)) + noise ** 2 * np.eye(len(y))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return None
    a = np.linalg.solve(L, np.broadcast_to(y[:, None], (len(ls), len(y), 1)))[..., 0]
    logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
    vals = -0.5 * (a * a).sum(1) - logdet - 0.5 * len(y) * _LOG_2PI
    return vals if np.isfinite(vals).all() else None


def fit_lengthscale(X: np.ndarray, y: np.ndarray,
                    bounds: Tuple[float, float] = LENGTHSCALE_BOUNDS,
                    noise: float = NOISE, sigma0: float = SIGMA0) -> KernelParams:
    """Type-II maximum likelihood lengthscale on a log grid with golden-section polish.

    Ties go to the larger lengthscale. When every evaluation fails the upper
    bound is returned and a :class:`LengthscaleFallbackWarning` is emitted.
    """
    lo, hi = bounds
    if not 0 < lo <= hi:
        raise ValueError("lengthscale bounds must satisfy 0 < lo <= hi")
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) == 0:
        raise ValueError("cannot fit a lengthscale without samples")
    D2 = sqdist(X, X)

    def score(log_l):
        try:
            return _lml_from_d2(D2, y, sigma0, math.exp(log_l), noise)
        except np.linalg.LinAlgError:
            return -math.inf

    grid = np.linspace(math.log(lo), math.log(hi), N_GRID)
    vals = _lml_batch(D2, y, sigma0, np.exp(grid), noise)
    if vals is None:
        vals = np.array([score(g) for g in grid])
    if not np.isfinite(vals).any():
        warnings.warn("all likelihood evaluations failed; using the upper lengthscale bound",
                      LengthscaleFallbackWarning, stacklevel=2)
        return KernelParams(sigma0, hi)
    best = int(np.flatnonzero(vals == vals.max())[-1])
    best_x, best_v = grid[best], vals[best]

    a, b = grid[max(best - 1, 0)], grid[min(best + 1, N_GRID - 1)]
    c, d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
    fc, fd = score(c), score(d)
    for _ in range(N_GOLDEN):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = score(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = score(d)
    x, v = (c, fc) if fc > fd else (d, fd)
    if v > best_v:
        best_x = x
    return KernelParams(sigma0, float(min(max(math.exp(best_x), lo), hi)))


class GaussianProcess(RegressorMixin, BaseEstimator):
    """Exact GP regressor over 2-D cell coordinates.

    Parameters
    ----------
    sigma0 : float
        Prior amplitude; fixed during fitting.
    noise : float
        Observation noise standard deviation; fixed, used as jitter.
    lengthscale : float
        Initial (and, with ``optimize=False``, final) lengthscale.
    lengthscale_bounds : tuple of float
        Search interval for the marginal-likelihood fit.
    optimize : bool
        Fit the lengthscale on every call to :meth:`fit`.
    """

    def __init__(self, sigma0=SIGMA0, noise=NOISE, lengthscale=LENGTHSCALE_BOUNDS[1],
                 lengthscale_bounds=LENGTHSCALE_BOUNDS, optimize=True):
        self.sigma0 = sigma0
        self.noise = noise
        self.lengthscale = lengthscale
        self.lengthscale_bounds = lengthscale_bounds
        self.optimize = optimize

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 2:
            raise ValueError("X must hold (row, col) coordinates")
        X, y = dedup(X, y)
        if self.optimize:
            self.kernel_ = fit_lengthscale(X, y, self.lengthscale_bounds, self.noise, self.sigma0)
        else:
            self.kernel_ = KernelParams(self.sigma0, self.lengthscale)
        self.L_, self.noise_variance_ = cholesky_jitter(rbf_matrix(X, X, self.kernel_), self.noise)
        self.X_train_, self.y_train_ = X, y
        self.n_features_in_ = 2
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "L_")
        X = check_array(X)
        mean, var = _posterior(self.L_, self.X_train_, self.y_train_, self.kernel_, X)
        if return_std:
            return mean, np.sqrt(var)
        return mean

    def log_marginal_likelihood(self, lengthscale: Optional[float] = None) -> float:
        check_is_fitted(self, "L_")
        kp = self.kernel_ if lengthscale is None else KernelParams(self.sigma0, lengthscale)
        return log_marginal_likelihood(self.X_train_, self.y_train_, kp, self.noise)
