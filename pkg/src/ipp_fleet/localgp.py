"""Bank of local Gaussian processes with exponential-distance fusion.

Each local GP owns a centroid and an influence radius. A sample is routed to
every GP whose disk contains it, touched GPs refit their lengthscale, and the
per-GP posteriors are blended with weights ``exp(-|x - c_i|)`` (distance in
cells) into a fused mean and standard deviation.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import gp
from .gridmap import NavMap, disk_mask

SPACING = 2000.0
RADIUS = 1450.0


class LayoutError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LocalLayout:
    centroids: np.ndarray
    radius: float
    cell_size: float
    n_repairs: int = 0

    @property
    def count(self) -> int:
        return len(self.centroids)

    @property
    def radius_cells(self) -> float:
        return self.radius / self.cell_size

    def membership(self, cells: np.ndarray) -> np.ndarray:
        """``(n, K)`` boolean: cell ``i`` lies in the disk of GP ``k``."""
        d = np.sqrt(gp.sqdist(cells, self.centroids))
        return d * self.cell_size <= self.radius


def _lattice(n: int, s: int) -> np.ndarray:
    count = (n - 1) // s + 1
    start = ((n - 1) - (count - 1) * s) // 2
    return start + s * np.arange(count)


def build_layout(navmap: NavMap, spacing: float = SPACING, radius: float = RADIUS) -> LocalLayout:
    if not (spacing > 0 and radius > 0):
        raise LayoutError("spacing and radius must be positive")
    s = max(1, int(round(spacing / navmap.cell_size)))
    cells = navmap.cells
    chosen = []
    for r in _lattice(navmap.height, s):
        for c in _lattice(navmap.width, s):
            if not disk_mask(navmap, (r, c), radius).any():
                continue
            d2 = (cells[:, 0] - r) ** 2 + (cells[:, 1] - c) ** 2
            snapped = tuple(int(v) for v in cells[int(np.argmin(d2))])
            if snapped not in chosen:
                chosen.append(snapped)
    if not chosen:
        chosen.append(tuple(int(v) for v in cells[len(cells) // 2]))
    layout = LocalLayout(np.array(chosen, dtype=int), float(radius), navmap.cell_size)

    # greedy coverage repair
    member = layout.membership(cells)
    covered = member.any(axis=1)
    limit = 4 * len(chosen)
    repairs = 0
    while not covered.all():
        if repairs >= limit:
            raise LayoutError(
                f"coverage repair needs more than {limit} extra centroids; reduce the spacing")
        uncovered = cells[~covered]
        reach = np.sqrt(gp.sqdist(uncovered, uncovered)) * navmap.cell_size <= radius
        pick = uncovered[int(np.argmax(reach.sum(axis=1)))]
        chosen.append((int(pick[0]), int(pick[1])))
        d = np.hypot(cells[:, 0] - pick[0], cells[:, 1] - pick[1]) * navmap.cell_size
        covered |= d <= radius
        repairs += 1
    return LocalLayout(np.array(chosen, dtype=int), float(radius), navmap.cell_size, repairs)


def single_layout(navmap: NavMap) -> LocalLayout:
    """One centroid with unbounded radius: the plain global GP."""
    cells = navmap.cells
    center = np.array(navmap.shape, dtype=float) / 2.0
    pick = cells[int(np.argmin(((cells - center) ** 2).sum(axis=1)))]
    return LocalLayout(pick[None, :].astype(int), math.inf, navmap.cell_size)


def fusion_weights(queries: np.ndarray, centroids: np.ndarray,
                   mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Unnormalized weights ``exp(-d)``, shifted per row by the nearest centroid distance.

    The shift cancels in the ratio and keeps the nearest weight at exactly 1.
    Rows of ``mask`` with no covering GP fall back to all GPs.
    """
    d = np.sqrt(gp.sqdist(queries, centroids))
    if mask is not None:
        mask = mask | ~mask.any(axis=1, keepdims=True)
        d = np.where(mask, d, np.inf)
    return np.exp(-(d - d.min(axis=1, keepdims=True)))


def fuse(weights: np.ndarray, means: np.ndarray, stds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted means of per-GP surfaces; ``means``/``stds`` are ``(n, K)``."""
    # Sequential accumulation over K keeps the numerator and denominator on the
    # same rounding path, so constant surfaces fuse to themselves exactly.
    total = np.zeros(len(weights))
    num_m = np.zeros(len(weights))
    num_s = np.zeros(len(weights))
    for k in range(weights.shape[1]):
        w = weights[:, k]
        total += w
        num_m += w * means[:, k]
        num_s += w * stds[:, k]
    return num_m / total, num_s / total


def kl_diag(prev_mean, prev_std, next_mean, next_std) -> float:
    """KL divergence between two diagonal Gaussians (prev -> next)."""
    v1 = np.maximum(np.asarray(prev_std, dtype=float) ** 2, gp.VARIANCE_FLOOR)
    v2 = np.maximum(np.asarray(next_std, dtype=float) ** 2, gp.VARIANCE_FLOOR)
    dmu = np.asarray(next_mean, dtype=float) - np.asarray(prev_mean, dtype=float)
    return float(0.5 * (np.log(v2 / v1).sum() - v1.size + (v1 / v2).sum() + (dmu ** 2 / v2).sum()))


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("IPP_FLEET_THREADS", "1")))
    except ValueError:
        return 1


class LocalGaussianProcesses(RegressorMixin, BaseEstimator):
    """Online local-GP model over a navigation map.

    ``fit`` starts from scratch; ``partial_fit`` routes new samples and refits
    only the touched GPs. After every update ``fused_mean_`` and ``fused_std_``
    hold the fused surfaces over ``navmap.cells``.

    Parameters
    ----------
    navmap : NavMap
    spacing, radius : float
        Centroid lattice spacing and influence radius, meters.
    centroids : array-like of shape (K, 2), optional
        Explicit centroids; bypasses the lattice.
    restrict_fusion : bool
        Blend only GPs whose disk covers the query instead of all K.
    """

    def __init__(self, navmap: NavMap = None, spacing=SPACING, radius=RADIUS, centroids=None,
                 sigma0=gp.SIGMA0, noise=gp.NOISE, lengthscale_bounds=gp.LENGTHSCALE_BOUNDS,
                 optimize=True, restrict_fusion=False, n_jobs=None):
        self.navmap = navmap
        self.spacing = spacing
        self.radius = radius
        self.centroids = centroids
        self.sigma0 = sigma0
        self.noise = noise
        self.lengthscale_bounds = lengthscale_bounds
        self.optimize = optimize
        self.restrict_fusion = restrict_fusion
        self.n_jobs = n_jobs

    # -- lifecycle -----------------------------------------------------------
    def _init_state(self):
        if self.navmap is None:
            raise ValueError("navmap is required")
        if self.centroids is None:
            self.layout_ = build_layout(self.navmap, self.spacing, self.radius)
        else:
            cent = np.asarray(self.centroids, dtype=int).reshape(-1, 2)
            self.layout_ = LocalLayout(cent, float(self.radius), self.navmap.cell_size)
        K = self.layout_.count
        cells = self.navmap.cells
        self.samples_ = {}
        self.gp_samples_ = [dict() for _ in range(K)]
        self.kernels_ = [gp.KernelParams(self.sigma0, self.lengthscale_bounds[1]) for _ in range(K)]
        self.factors_ = [None] * K
        self.fallbacks_ = 0
        self._cover = self.layout_.membership(cells)
        self._weights = fusion_weights(cells, self.layout_.centroids,
                                       self._cover if self.restrict_fusion else None)
        self.gp_means_ = np.zeros((len(cells), K))
        self.gp_stds_ = np.full((len(cells), K), float(self.sigma0))
        self.fit_time_ = 0.0
        self._fuse_cells()

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self._init_state()
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        if not hasattr(self, "layout_"):
            self._init_state()
        X = np.asarray(X, dtype=int).reshape(-1, 2)
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        t0 = time.perf_counter()
        touched = set()
        member = self.layout_.membership(X)
        for cell, value, row in zip(X.tolist(), y, member):
            cell = tuple(cell)
            ks = np.flatnonzero(row)
            if len(ks) == 0:
                raise AssertionError(f"sample {cell} outside every local GP")
            self.samples_[cell] = float(value)
            for k in ks:
                self.gp_samples_[k][cell] = float(value)
                touched.add(int(k))
        touched = sorted(touched)
        jobs = self.n_jobs or _default_jobs()
        if jobs > 1 and len(touched) > 1:
            with ThreadPoolExecutor(jobs) as pool:
                results = list(pool.map(self._refit, touched))
        else:
            results = [self._refit(k) for k in touched]
        for k, (kp, L, mean, std) in zip(touched, results):
            self.kernels_[k], self.factors_[k] = kp, L
            self.gp_means_[:, k], self.gp_stds_[:, k] = mean, std
        self._fuse_cells()
        self.fit_time_ += time.perf_counter() - t0
        return self

    def _gp_data(self, k):
        data = self.gp_samples_[k]
        X = np.array(list(data.keys()), dtype=float).reshape(-1, 2)
        return X, np.fromiter(data.values(), dtype=float, count=len(data))

    def _refit(self, k):
        X, y = self._gp_data(k)
        if self.optimize:
            kp = gp.fit_lengthscale(X, y, self.lengthscale_bounds, self.noise, self.sigma0)
        else:
            kp = self.kernels_[k]
        L, _ = gp.cholesky_jitter(gp.rbf_matrix(X, X, kp), self.noise)
        mean, var = gp._posterior(L, X, y, kp, self.navmap.cells)
        return kp, L, mean, np.sqrt(var)

    def _fuse_cells(self):
        self.fused_mean_, self.fused_std_ = fuse(self._weights, self.gp_means_, self.gp_stds_)
        self.n_features_in_ = 2

    # -- queries -------------------------------------------------------------
    def gp_posterior(self, k: int, queries) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation of local GP ``k``."""
        Q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if self.factors_[k] is None:
            return np.zeros(len(Q)), np.full(len(Q), float(self.sigma0))
        X, y = self._gp_data(k)
        mean, var = gp._posterior(self.factors_[k], X, y, self.kernels_[k], Q)
        return mean, np.sqrt(var)

    def predict(self, X, return_std=False):
        check_is_fitted(self, "layout_")
        Q = check_array(X)
        K = self.layout_.count
        means = np.empty((len(Q), K))
        stds = np.empty((len(Q), K))
        for k in range(K):
            means[:, k], stds[:, k] = self.gp_posterior(k, Q)
        mask = self.layout_.membership(Q) if self.restrict_fusion else None
        mean, std = fuse(fusion_weights(Q, self.layout_.centroids, mask), means, stds)
        return (mean, std) if return_std else mean

    @property
    def n_samples_(self) -> int:
        return len(self.samples_)

    def mean_grid(self) -> np.ndarray:
        return self.navmap.to_grid(self.fused_mean_)

    def std_grid(self) -> np.ndarray:
        return self.navmap.to_grid(self.fused_std_)


def add_sample(model: LocalGaussianProcesses, cell: Sequence[int], value: float):
    return model.partial_fit(np.asarray([cell]), np.asarray([value]))
