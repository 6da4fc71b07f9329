"""Dueling double deep Q-learning with a shared network and safe joint action selection."""

from .consensus import ConsensusResult, one_hot_scores, safe_consensus
from .network import QNetwork, QNetworkSpec, load_checkpoint, save_checkpoint
from .replay import ReplayBuffer
