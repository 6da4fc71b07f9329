"""Seeded generators for the two benchmark contamination fields.

Both generators return a :class:`ScalarField` whose values are normalized to
``[0, 1]`` (max exactly 1) over the navigable cells of a :class:`NavMap`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .gridmap import NavMap

WQP = "wqp"
ALGAE = "algae"


@dataclass(frozen=True)
class GTConfig:
    kind: str = WQP
    seed: int = 0
    wqp_peaks: Tuple[int, int] = (3, 6)
    wqp_width: Tuple[float, float] = (2.0, 8.0)
    wqp_amplitude: Tuple[float, float] = (0.3, 1.0)
    algae_blooms: Tuple[int, int] = (1, 3)
    algae_particles: int = 50
    algae_burn_in: Tuple[int, int] = (20, 100)
    algae_kernel: float = 1.5
    algae_step: float = 1.0
    drift: Tuple[float, float] = (0.2, 0.1)

    def __post_init__(self):
        if self.kind not in (WQP, ALGAE):
            raise ValueError(f"unknown ground truth kind {self.kind!r}")
        for name in ("wqp_peaks", "wqp_width", "wqp_amplitude", "algae_blooms", "algae_burn_in"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.wqp_peaks[0] < 1 or self.algae_blooms[0] < 1 or self.algae_particles < 1:
            raise ValueError("peak, bloom and particle counts must be at least 1")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Ground truth over the navigable cells of ``navmap`` (ordered as ``navmap.cells``)."""

    navmap: NavMap
    values: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.navmap.n_navigable,):
            raise ValueError("one value per navigable cell required")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise ValueError("field values must be finite and within [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> np.ndarray:
        """Full ``(H, W)`` array; land carries NaN."""
        return self.navmap.to_grid(self.values, fill=np.nan)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("row,col,value\n")
        for (r, c), v in zip(self.navmap.cells, self.values):
            buf.write(f"{r},{c},{v:.10g}\n")
        return buf.getvalue()


def _normalize(raw: np.ndarray) -> np.ndarray:
    top = raw.max()
    if top <= 0:
        return np.zeros_like(raw)
    return np.clip(raw / top, 0.0, 1.0)


def bump_sum(cells: np.ndarray, centers: np.ndarray, widths: np.ndarray,
             amplitudes: np.ndarray) -> np.ndarray:
    """Unnormalized sum of isotropic Gaussian bumps evaluated at ``cells``."""
    d2 = ((cells[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return (amplitudes * np.exp(-d2 / (2.0 * widths ** 2))).sum(axis=1)


def gen_wqp(navmap: NavMap, cfg: GTConfig) -> ScalarField:
    rng = np.random.default_rng(cfg.seed)
    n = int(rng.integers(cfg.wqp_peaks[0], cfg.wqp_peaks[1] + 1))
    cells = navmap.cells.astype(float)
    centers = cells[rng.integers(0, len(cells), size=n)]
    widths = rng.uniform(*cfg.wqp_width, size=n)
    amplitudes = rng.uniform(*cfg.wqp_amplitude, size=n)
    values = _normalize(bump_sum(cells, centers, widths, amplitudes))
    params = {"centers": centers, "widths": widths, "amplitudes": amplitudes}
    return ScalarField(navmap, values, WQP, params)


def _walk(navmap: NavMap, pos: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Advance particles, mirroring the move (or holding) when it would land on shore."""
    out = pos.copy()
    for i in range(len(pos)):
        for cand in (pos[i] + step[i], pos[i] - step[i]):
            cell = (int(np.rint(cand[0])), int(np.rint(cand[1])))
            if navmap.is_navigable(cell):
                out[i] = cand
                break
    return out


def deposit(cells: np.ndarray, particles: np.ndarray, kernel: float) -> np.ndarray:
    d2 = ((cells[:, None, :] - particles[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * kernel ** 2)).sum(axis=1)


def gen_algae(navmap: NavMap, cfg: GTConfig) -> ScalarField:
    rng = np.random.default_rng(cfg.seed)
    n = int(rng.integers(cfg.algae_blooms[0], cfg.algae_blooms[1] + 1))
    burn_in = int(rng.integers(cfg.algae_burn_in[0], cfg.algae_burn_in[1] + 1))
    cells = navmap.cells.astype(float)
    seeds = cells[rng.integers(0, len(cells), size=n)]
    particles = np.repeat(seeds, cfg.algae_particles, axis=0)
    drift = np.asarray(cfg.drift, dtype=float)
    for _ in range(burn_in):
        step = rng.normal(0.0, cfg.algae_step, size=particles.shape) + drift
        particles = _walk(navmap, particles, step)
    values = _normalize(deposit(cells, particles, cfg.algae_kernel))
    params = {"seeds": seeds, "burn_in": burn_in, "particles": particles}
    return ScalarField(navmap, values, ALGAE, params)


def generate(navmap: NavMap, cfg: GTConfig) -> ScalarField:
    return gen_wqp(navmap, cfg) if cfg.kind == WQP else gen_algae(navmap, cfg)


def sample(gt: ScalarField, cell: Sequence[int]) -> float:
    """Noise-free measurement of the field at ``cell``."""
    idx = gt.navmap.index_of(cell)
    if idx < 0:
        raise ValueError(f"cannot sample non-navigable cell {tuple(cell)}")
    return float(gt.values[idx])
