"""Multi-vehicle lake monitoring environment.

Agents move simultaneously on the grid, sample the hidden field, feed the
samples into a local-GP model and receive information-gain rewards computed
from the change of the fused model inside their influence disks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import gp
from .gridmap import NavMap, apply_action, default_map
from .groundtruth import GTConfig, ScalarField, generate, sample
from .localgp import RADIUS, SPACING, LocalGaussianProcesses, single_layout
from .metrics import sor

MU = "mu"
SIGMA = "sigma"
N_CHANNELS = 5


class ContractViolation(RuntimeError):
    """An action that the safety layer should have filtered reached the environment."""


class EnvConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    navmap: NavMap = field(default_factory=default_map)
    n_agents: int = 1
    gt: GTConfig = field(default_factory=GTConfig)
    reward: str = MU
    budget: int = 50
    d_safety: float = 300.0
    influence_radius: float = RADIUS   # local-GP radius; reward disks follow it
    spacing: float = SPACING
    model: str = "local"               # "local" or "global"
    lengthscale_bounds: tuple = gp.LENGTHSCALE_BOUNDS
    sigma0: float = gp.SIGMA0
    noise: float = gp.NOISE
    restrict_fusion: bool = False
    max_placement_tries: int = 1000

    def __post_init__(self):
        if self.n_agents < 1:
            raise EnvConfigError("n_agents must be at least 1")
        if self.reward not in (MU, SIGMA):
            raise EnvConfigError(f"unknown reward kind {self.reward!r}")
        if self.model not in ("local", "global"):
            raise EnvConfigError(f"unknown model kind {self.model!r}")
        if self.budget < 1:
            raise EnvConfigError("budget must be positive")

    def make_model(self) -> LocalGaussianProcesses:
        kw = dict(sigma0=self.sigma0, noise=self.noise, lengthscale_bounds=self.lengthscale_bounds,
                  restrict_fusion=self.restrict_fusion)
        if self.model == "global":
            return LocalGaussianProcesses(self.navmap, centroids=single_layout(self.navmap).centroids,
                                          radius=math.inf, **kw)
        return LocalGaussianProcesses(self.navmap, spacing=self.spacing,
                                      radius=self.influence_radius, **kw)


@dataclass
class FleetState:
    positions: np.ndarray
    step_count: int
    budget: int
    gt: ScalarField
    model: LocalGaussianProcesses
    prev_mu: np.ndarray
    prev_sigma: np.ndarray
    last_actions: Optional[np.ndarray] = None


def min_separation(navmap: NavMap, positions) -> float:
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        return math.inf
    d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    return float(d[np.triu_indices(len(p), 1)].min()) * navmap.cell_size


def influence_masks(navmap: NavMap, positions, radius: float) -> np.ndarray:
    """``(N, n_cells)`` membership of navigable cells in each agent's influence disk."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    cells = navmap.cells.astype(float)
    d = np.sqrt(((cells[None, :, :] - p[:, None, :]) ** 2).sum(-1)) * navmap.cell_size
    return d <= radius


def redundancy(navmap: NavMap, positions, cell, radius: float) -> int:
    """Number of agents whose influence disk contains ``cell``."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    d = np.hypot(p[:, 0] - cell[0], p[:, 1] - cell[1]) * navmap.cell_size
    return int((d <= radius).sum())


def information_rewards(navmap: NavMap, positions, before: np.ndarray, after: np.ndarray,
                        radius: float) -> np.ndarray:
    """Per-agent sum over its disk of ``|after - before|`` split by the redundancy count."""
    masks = influence_masks(navmap, positions, radius)
    rho = masks.sum(axis=0)
    share = np.abs(after - before) / np.maximum(rho, 1)
    return np.array([share[m].sum() for m in masks])


def minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


class FleetEnv:
    """Episode lifecycle, observations and rewards for a fleet of surface vehicles."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.navmap = cfg.navmap
        self.state: Optional[FleetState] = None
        self._nav_channel = minmax(self.navmap.navigable.astype(np.float32))

    @property
    def n_agents(self) -> int:
        return self.cfg.n_agents

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.step_count >= self.state.budget

    def _zones(self):
        zones = self.navmap.zones or (tuple(map(tuple, self.navmap.cells.tolist())),)
        return [zones[j % len(zones)] for j in range(self.n_agents)]

    def _place(self, rng: np.random.Generator) -> np.ndarray:
        zones = self._zones()
        for _ in range(self.cfg.max_placement_tries):
            pos = np.array([zone[int(rng.integers(len(zone)))] for zone in zones], dtype=int)
            if min_separation(self.navmap, pos) >= self.cfg.d_safety:
                return pos
        raise EnvConfigError(
            f"could not seat {self.n_agents} agents {self.cfg.d_safety} m apart in their zones")

    def reset(self, seed: int) -> np.ndarray:
        """Start an episode; the seed fixes both the ground truth and the placement."""
        ss = np.random.SeedSequence(seed)
        gt_seed, place_seed = ss.spawn(2)
        gt_cfg = replace(self.cfg.gt, seed=int(gt_seed.generate_state(1)[0]))
        gt = generate(self.navmap, gt_cfg)
        positions = self._place(np.random.default_rng(place_seed))
        model = self.cfg.make_model()
        values = [sample(gt, p) for p in positions]
        model.partial_fit(positions, values)
        self.state = FleetState(positions, 0, self.cfg.budget, gt, model,
                                model.fused_mean_.copy(), model.fused_std_.copy())
        self.last_measurements = np.array(values)
        return self.observations()

    # -- observations ----------------------------------------------------------
    def observe(self, j: int) -> np.ndarray:
        s = self.state
        if not 0 <= j < self.n_agents:
            raise IndexError(f"agent {j} out of range")
        H, W = self.navmap.shape
        obs = np.zeros((N_CHANNELS, H, W), dtype=np.float32)
        obs[0] = minmax(self.navmap.to_grid(s.model.fused_mean_))
        obs[1] = minmax(self.navmap.to_grid(s.model.fused_std_))
        obs[2] = self._nav_channel
        r, c = s.positions[j]
        obs[3, r, c] = 1.0
        for k, (r, c) in enumerate(s.positions):
            if k != j:
                obs[4, r, c] = 1.0
        return obs

    def observations(self) -> np.ndarray:
        return np.stack([self.observe(j) for j in range(self.n_agents)])

    # -- dynamics --------------------------------------------------------------
    def targets(self, actions: Sequence[int]) -> np.ndarray:
        s = self.state
        out = []
        for j, a in enumerate(actions):
            t = apply_action(self.navmap, s.positions[j], int(a))
            if t is None:
                raise ContractViolation(f"agent {j}: action {int(a)} from {tuple(s.positions[j])} is blocked")
            out.append(t)
        return np.array(out, dtype=int)

    def step(self, actions: Sequence[int]):
        """Move every agent, sample, update the model and score the step.

        Returns ``(observations, rewards, done, info)``.
        """
        s = self.state
        if s is None:
            raise RuntimeError("reset() must be called first")
        if s.step_count >= s.budget:
            raise ContractViolation("episode already finished")
        if len(actions) != self.n_agents:
            raise ContractViolation(f"expected {self.n_agents} actions, got {len(actions)}")
        new = self.targets(actions)
        sep = min_separation(self.navmap, new)
        if sep < self.cfg.d_safety:
            raise ContractViolation(f"agents {sep:.0f} m apart, below d_safety={self.cfg.d_safety} m")

        s.prev_mu = s.model.fused_mean_.copy()
        s.prev_sigma = s.model.fused_std_.copy()
        values = np.array([sample(s.gt, p) for p in new])
        s.model.partial_fit(new, values)
        s.positions = new
        s.last_actions = np.asarray(actions, dtype=int)
        s.step_count += 1
        self.last_measurements = values

        if self.cfg.reward == MU:
            before, after = s.prev_mu, s.model.fused_mean_
        else:
            before, after = s.prev_sigma, s.model.fused_std_
        rewards = information_rewards(self.navmap, new, before, after, self.cfg.influence_radius)
        info = {"measurements": values, "sor": self.sor()}
        return self.observations(), rewards, self.done, info

    def sor(self) -> float:
        return sor(self.state.model.fused_mean_, self.state.gt)
