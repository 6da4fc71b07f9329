"""FIFO replay memory with a compact observation store.

Observations are 5 x H x W stacks. The model channels are kept as float16,
the binary channels (map, self, others) are bit-packed, which cuts memory
roughly 4x against float32 at desk-scale capacities.
"""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

BINARY_CHANNELS = (2, 3, 4)


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape: Tuple[int, int, int],
                 binary_channels: Sequence[int] = BINARY_CHANNELS):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        C, H, W = self.obs_shape
        self.binary = tuple(c for c in binary_channels if c < C)
        self.dense = tuple(c for c in range(C) if c not in self.binary)
        n_bits = len(self.binary) * H * W
        self._bytes = (n_bits + 7) // 8
        # np.zeros is lazily backed, so unused capacity costs nothing
        self._dense = np.zeros((2, capacity, len(self.dense), H, W), dtype=np.float16)
        self._bits = np.zeros((2, capacity, self._bytes), dtype=np.uint8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=bool)
        self.ids = np.zeros(capacity, dtype=np.int64)
        self._head = 0
        self._size = 0
        self._count = 0

    def __len__(self) -> int:
        return self._size

    @property
    def pushed(self) -> int:
        return self._count

    def _encode(self, slot: int, which: int, obs: np.ndarray):
        obs = np.asarray(obs)
        if obs.shape != self.obs_shape:
            raise ValueError(f"observation shape {obs.shape} != {self.obs_shape}")
        self._dense[which, slot] = obs[list(self.dense)]
        if self.binary:
            self._bits[which, slot] = np.packbits(obs[list(self.binary)].ravel() > 0.5)

    def _decode(self, which: int, slots: np.ndarray) -> np.ndarray:
        C, H, W = self.obs_shape
        out = np.empty((len(slots), C, H, W), dtype=np.float32)
        out[:, list(self.dense)] = self._dense[which, slots]
        if self.binary:
            bits = np.unpackbits(self._bits[which, slots], axis=1, count=len(self.binary) * H * W)
            out[:, list(self.binary)] = bits.reshape(len(slots), len(self.binary), H, W)
        return out

    def push(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        if not np.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        i = self._head
        self._encode(i, 0, obs)
        self._encode(i, 1, next_obs)
        self.actions[i] = int(action)
        self.rewards[i] = float(reward)
        self.dones[i] = bool(done)
        self.ids[i] = self._count
        self._count += 1
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def order(self) -> np.ndarray:
        """Insertion ids from oldest to newest."""
        start = (self._head - self._size) % self.capacity
        return self.ids[(start + np.arange(self._size)) % self.capacity]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        if batch_size > self._size:
            raise ValueError(f"batch of {batch_size} from a buffer holding {self._size}")
        slots = rng.choice(self._size, size=batch_size, replace=False)
        slots = (self._head - self._size + slots) % self.capacity
        return self.gather(slots)

    def gather(self, slots) -> Dict[str, np.ndarray]:
        slots = np.asarray(slots)
        return {
            "obs": self._decode(0, slots),
            "actions": self.actions[slots],
            "rewards": self.rewards[slots],
            "next_obs": self._decode(1, slots),
            "dones": self.dones[slots],
            "ids": self.ids[slots],
        }
