"""Training loop: shared dueling network, double-Q targets, Polyak-averaged target net."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..env import EnvConfig, FleetEnv
from ..gridmap import N_ACTIONS
from .consensus import safe_consensus
from .network import QNetwork, QNetworkSpec, get_flat, save_checkpoint
from .replay import ReplayBuffer

log = logging.getLogger(__name__)

TRAIN_STREAM = 0x7A11   # env seeds for training episodes live under this tag
EVAL_STREAM = 0xE7A1    # ... and evaluation episodes under this one


def episode_seed(stream: int, seed: int, episode: int):
    return (stream, int(seed), int(episode))


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("IPP_FLEET_THREADS", "1")))
    except ValueError:
        return 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    episodes: int = 600
    lr: float = 1e-4
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 1e-4
    eps_min: float = 0.05
    eps_decay: float = 1.9e-4
    buffer_capacity: int = 50_000
    warmup: Optional[int] = None        # defaults to one batch
    checkpoint_every: int = 100
    seed: int = 0
    conv_channels: tuple = (16, 32, 64)
    fc_width: int = 256

    def __post_init__(self):
        for name in ("episodes", "lr", "batch_size", "eps_decay", "buffer_capacity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.gamma <= 1 and 0 <= self.tau <= 1 and 0 <= self.eps_min <= 1):
            raise ValueError("gamma, tau and eps_min must lie in [0, 1]")

    @property
    def net_spec(self) -> QNetworkSpec:
        H, W = self.env.navmap.shape
        return QNetworkSpec(height=H, width=W, conv_channels=tuple(self.conv_channels),
                            fc_width=self.fc_width)


def epsilon(episode: int, cfg: TrainConfig) -> float:
    if episode < 0:
        raise ValueError("episode must be non-negative")
    return max(cfg.eps_min, 1.0 - cfg.eps_decay * episode)


def q_values(net: QNetwork, obs) -> np.ndarray:
    with torch.no_grad():
        return net(torch.as_tensor(np.asarray(obs, dtype=np.float32))).numpy().astype(float)


def td_targets(batch: Dict[str, np.ndarray], online: QNetwork, target: QNetwork,
               gamma: float) -> torch.Tensor:
    """Double-Q targets: the online net picks the next action, the target net scores it."""
    next_obs = torch.as_tensor(batch["next_obs"])
    r = torch.as_tensor(batch["rewards"], dtype=torch.float32)
    not_done = 1.0 - torch.as_tensor(batch["dones"], dtype=torch.float32)
    with torch.no_grad():
        a_star = online(next_obs).argmax(dim=1, keepdim=True)
        q_next = target(next_obs).gather(1, a_star).squeeze(1)
    return r + gamma * not_done * q_next


@torch.no_grad()
def polyak_update(online: QNetwork, target: QNetwork, tau: float) -> None:
    for p, tp in zip(online.parameters(), target.parameters()):
        tp.mul_(1.0 - tau).add_(p, alpha=tau)


class DDQLLearner:
    """Online and target networks, optimizer and replay memory for one training run."""

    def __init__(self, cfg: TrainConfig, net: Optional[QNetwork] = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.online = net if net is not None else QNetwork(cfg.net_spec)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.optimizer = torch.optim.Adam(self.online.parameters(), lr=cfg.lr)
        spec = self.online.spec
        self.buffer = ReplayBuffer(cfg.buffer_capacity, (spec.in_channels, spec.height, spec.width))

    def loss(self, batch) -> torch.Tensor:
        y = td_targets(batch, self.online, self.target, self.cfg.gamma)
        q = self.online(torch.as_tensor(batch["obs"]))
        q_a = q.gather(1, torch.as_tensor(batch["actions"]).view(-1, 1)).squeeze(1)
        return F.mse_loss(q_a, y)

    def train_step(self, rng: np.random.Generator, batch=None) -> float:
        if batch is None:
            batch = self.buffer.sample(self.cfg.batch_size, rng)
        loss = self.loss(batch)
        if not torch.isfinite(loss):
            flat = get_flat(self.online)
            raise TrainingDiverged(
                f"non-finite loss {loss.item()}; rewards in [{batch['rewards'].min():.3g}, "
                f"{batch['rewards'].max():.3g}], |weights|max={np.abs(flat).max():.3g}, "
                f"weights finite={np.isfinite(flat).all()}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        polyak_update(self.online, self.target, self.cfg.tau)
        return float(loss.item())


@dataclass
class EpisodeLog:
    episode: int
    epsilon: float
    mean_reward: float
    final_sor: float
    loss_mean: float
    loss_max: float
    null_actions: int


LOG_FIELDS = ["episode", "epsilon", "mean_reward", "final_sor", "loss_mean", "loss_max",
              "null_actions"]


def run_training(cfg: TrainConfig, out_dir=None, progress=None):
    """Train a shared Q-network; returns ``(network, [EpisodeLog, ...], learner)``.

    Writes ``train_log.csv`` and checkpoints into ``out_dir`` when given.
    """
    torch.set_num_threads(worker_threads())
    learner = DDQLLearner(cfg)
    env = FleetEnv(cfg.env)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, TRAIN_STREAM]))
    warmup = cfg.warmup or cfg.batch_size
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    logs: List[EpisodeLog] = []
    try:
        for ep in range(cfg.episodes):
            eps = epsilon(ep, cfg)
            obs = env.reset(episode_seed(TRAIN_STREAM, cfg.seed, ep))
            done, rewards, losses, nulls = False, [], [], 0
            while not done:
                if rng.random() < eps:
                    scores = rng.random((env.n_agents, N_ACTIONS))
                else:
                    scores = q_values(learner.online, obs)
                res = safe_consensus(scores, env.state.positions, env.navmap, cfg.env.d_safety)
                next_obs, r, done, _ = env.step(res.actions)
                for j in range(env.n_agents):
                    if res.null[j]:
                        nulls += 1   # a stay has no Q-head to credit
                        continue
                    learner.buffer.push(obs[j], res.actions[j], r[j], next_obs[j], done)
                rewards.append(r.mean())
                if len(learner.buffer) >= warmup:
                    losses.append(learner.train_step(rng))
                obs = next_obs
            row = EpisodeLog(ep, eps, float(np.mean(rewards)), env.sor(),
                             float(np.mean(losses)) if losses else math.nan,
                             float(np.max(losses)) if losses else math.nan, nulls)
            logs.append(row)
            if writer is not None:
                writer.writerow([row.episode, f"{row.epsilon:.6f}", f"{row.mean_reward:.6f}",
                                 f"{row.final_sor:.6f}", f"{row.loss_mean:.6g}",
                                 f"{row.loss_max:.6g}", row.null_actions])
                fh.flush()
                if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out / "checkpoints" / f"ep{ep + 1:05d}.ckpt", learner.online)
            if progress is not None:
                progress(row)
            log.info("episode %d eps=%.3f reward=%.3f sor=%.2f", ep, eps, row.mean_reward,
                     row.final_sor)
        if out is not None:
            save_checkpoint(out / "policy.ckpt", learner.online)
    finally:
        if writer is not None:
            fh.close()
    return learner.online, logs, learner
