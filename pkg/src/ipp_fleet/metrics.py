"""Estimation-error metrics: SoR, normalized SoR and errors at ground-truth peaks."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np
from scipy import ndimage, stats

from .groundtruth import ScalarField

PEAK_WINDOW = 5          # cells, ~1.5 km at 290 m/cell
PEAK_FLOOR = 0.1
PEAK_FLATNESS = 0.05


class UndefinedMetric(ValueError):
    pass


def _check(mu_hat: np.ndarray, gt: ScalarField) -> np.ndarray:
    mu_hat = np.asarray(mu_hat, dtype=float)
    if mu_hat.shape != gt.values.shape:
        raise ValueError(f"estimate has shape {mu_hat.shape}, ground truth support is {gt.values.shape}")
    return mu_hat


def sor(mu_hat, gt: ScalarField) -> float:
    return float(np.abs(_check(mu_hat, gt) - gt.values).sum())


def nsor(mu_hat, gt: ScalarField) -> float:
    mass = gt.values.sum()
    if mass <= 0:
        raise UndefinedMetric("nSoR undefined for an all-zero ground truth")
    return sor(mu_hat, gt) / float(mass)


def sobel_magnitude(grid: np.ndarray) -> np.ndarray:
    """Gradient magnitude from Sobel filters scaled to per-cell derivative units."""
    gr = ndimage.sobel(grid, axis=0, mode="constant") / 8.0
    gc = ndimage.sobel(grid, axis=1, mode="constant") / 8.0
    return np.hypot(gr, gc)


def detect_peaks(gt: ScalarField, window: int = PEAK_WINDOW, floor: float = PEAK_FLOOR,
                 flatness: float = PEAK_FLATNESS) -> List[Tuple[int, int]]:
    """Local maxima of the field, sorted by (row, col).

    A cell is a peak when it equals the maximum of its ``window``-sized
    neighborhood, exceeds ``floor``, and the Sobel magnitude of the Sobel
    gradient magnitude (a second-derivative proxy) is below ``flatness``.
    """
    grid = gt.navmap.to_grid(gt.values, fill=0.0)
    local_max = ndimage.maximum_filter(grid, size=window, mode="constant", cval=0.0)
    curvature = sobel_magnitude(sobel_magnitude(grid))
    hit = (grid == local_max) & (grid > floor) & (curvature < flatness) & gt.navmap.navigable
    return [(int(r), int(c)) for r, c in np.argwhere(hit)]


def peak_errors(mu_hat, gt: ScalarField, peaks=None) -> Tuple[float, float]:
    mu_hat = _check(mu_hat, gt)
    peaks = detect_peaks(gt) if peaks is None else peaks
    if not peaks:
        raise UndefinedMetric("ground truth has no detectable peaks")
    idx = [gt.navmap.index_of(p) for p in peaks]
    err = np.abs(mu_hat[idx] - gt.values[idx])
    return float(err.mean()), float(err.max())


def rank_sum_test(a, b, alternative: str = "less"):
    """One-sided Mann-Whitney rank-sum test; returns ``(statistic, p_value)``."""
    res = stats.mannwhitneyu(a, b, alternative=alternative)
    return float(res.statistic), float(res.pvalue)
