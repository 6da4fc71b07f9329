"""Dueling convolutional Q-network and its checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
from torch import nn

MAGIC = b"IPPQNET\x00"
VERSION = 1


@dataclass(frozen=True)
class QNetworkSpec:
    in_channels: int = 5
    height: int = 58
    width: int = 38
    conv_channels: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    stride: int = 2
    fc_width: int = 256
    fc_layers: int = 3
    n_actions: int = 8

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QNetworkSpec":
        d = json.loads(text)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


class QNetwork(nn.Module):
    """Conv encoder -> fully connected trunk -> value and advantage heads."""

    def __init__(self, spec: QNetworkSpec = QNetworkSpec()):
        super().__init__()
        self.spec = spec
        layers, c = [], spec.in_channels
        for out in spec.conv_channels:
            layers += [nn.Conv2d(c, out, spec.kernel_size, spec.stride, padding=spec.kernel_size // 2),
                       nn.ReLU()]
            c = out
        self.encoder = nn.Sequential(*layers, nn.Flatten())
        with torch.no_grad():
            n_flat = self.encoder(torch.zeros(1, spec.in_channels, spec.height, spec.width)).shape[1]
        trunk, width = [], n_flat
        for _ in range(spec.fc_layers):
            trunk += [nn.Linear(width, spec.fc_width), nn.ReLU()]
            width = spec.fc_width
        self.trunk = nn.Sequential(*trunk)
        self.value = nn.Linear(width, 1)
        self.advantage = nn.Linear(width, spec.n_actions)

    def heads(self, obs: torch.Tensor):
        expected = (self.spec.in_channels, self.spec.height, self.spec.width)
        if tuple(obs.shape[-3:]) != expected:
            raise ValueError(f"observation shape {tuple(obs.shape[-3:])} != {expected}")
        h = self.trunk(self.encoder(obs))
        return self.value(h), self.advantage(h)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        v, a = self.heads(obs)
        return v + (a - a.mean(dim=-1, keepdim=True))


def get_flat(net: nn.Module) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(net.parameters()).detach().cpu().numpy()


def set_flat(net: nn.Module, flat: np.ndarray) -> None:
    vec = torch.as_tensor(np.asarray(flat), dtype=next(net.parameters()).dtype)
    torch.nn.utils.vector_to_parameters(vec, net.parameters())


def save_checkpoint(path, net: QNetwork) -> None:
    weights = get_flat(net).astype("<f4")
    spec = net.spec.to_json().encode()
    header = (MAGIC + struct.pack("<I", VERSION) + net.spec.digest
              + struct.pack("<I", len(spec)) + spec + struct.pack("<Q", weights.size))
    Path(path).write_bytes(header + weights.tobytes())


def load_checkpoint(path) -> QNetwork:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a Q-network checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = data[12:44]
    (n_spec,) = struct.unpack_from("<I", data, 44)
    spec = QNetworkSpec.from_json(data[48:48 + n_spec].decode())
    if spec.digest != digest:
        raise ValueError(f"{path}: network spec hash mismatch")
    off = 48 + n_spec
    (count,) = struct.unpack_from("<Q", data, off)
    weights = np.frombuffer(data, dtype="<f4", count=count, offset=off + 8)
    net = QNetwork(spec)
    n_params = sum(p.numel() for p in net.parameters())
    if n_params != count:
        raise ValueError(f"{path}: {count} weights stored, network needs {n_params}")
    set_flat(net, weights.astype(np.float32))
    return net
