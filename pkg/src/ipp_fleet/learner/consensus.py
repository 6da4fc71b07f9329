"""SafeConsensus: greedy-sequential joint action selection under a separation constraint."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..gridmap import N_ACTIONS, NULL_ACTION, NavMap, apply_action


@dataclass
class ConsensusResult:
    actions: np.ndarray       # NULL_ACTION where an agent was boxed in
    targets: np.ndarray       # committed next cell per agent
    null: np.ndarray          # bool flag per agent
    order: List[int]          # decision order


def _far_enough(navmap: NavMap, cell, committed, d_safety: float) -> bool:
    lim = (d_safety / navmap.cell_size) ** 2
    return all((cell[0] - r) ** 2 + (cell[1] - c) ** 2 >= lim for r, c in committed)


def _run(scores, positions, navmap, d_safety, pinned):
    n = len(positions)
    actions = np.full(n, NULL_ACTION, dtype=int)
    targets = np.array(positions, dtype=int).copy()
    null = np.zeros(n, dtype=bool)
    committed = [tuple(int(v) for v in positions[j]) for j in pinned]
    null[list(pinned)] = True
    # stable sort: equal maxima keep the lower agent index first
    order = [int(j) for j in np.argsort(-scores.max(axis=1), kind="stable") if j not in pinned]
    for j in order:
        # stable sort again for the lowest-action-index tie rule
        for a in np.argsort(-scores[j], kind="stable"):
            t = apply_action(navmap, positions[j], int(a))
            if t is not None and _far_enough(navmap, t, committed, d_safety):
                actions[j], targets[j] = int(a), t
                committed.append(t)
                break
        else:
            null[j] = True
            committed.append(tuple(int(v) for v in positions[j]))
    return ConsensusResult(actions, targets, null, list(pinned) + order)


def safe_consensus(scores, positions, navmap: NavMap, d_safety: float,
                   stay=None) -> ConsensusResult:
    """Pick one action per agent so that no two next positions are closer than ``d_safety``.

    Agents decide in descending order of their best score; each takes its best
    action among those that are not blocked and keep clear of the cells already
    committed. An agent with no such action stays put (null action). If a
    stranded agent's own cell was claimed by an earlier agent, it is pinned
    first and the round is repeated, so the output is always safe as long as
    the current positions are. Agents flagged in ``stay`` hold their cells
    from the start.
    """
    scores = np.asarray(scores, dtype=float)
    positions = np.asarray(positions, dtype=int).reshape(-1, 2)
    if scores.shape != (len(positions), N_ACTIONS):
        raise ValueError(f"scores must be ({len(positions)}, {N_ACTIONS}), got {scores.shape}")
    pinned: List[int] = [] if stay is None else [int(j) for j in np.flatnonzero(stay)]
    while True:
        res = _run(scores, positions, navmap, d_safety, pinned)
        clash = _first_clash(navmap, res, d_safety, pinned)
        if clash is None:
            return res
        pinned.append(clash)


def _first_clash(navmap, res, d_safety, pinned) -> Optional[int]:
    for j in np.flatnonzero(res.null):
        if j in pinned:
            continue
        others = [tuple(res.targets[k]) for k in range(len(res.targets)) if k != j]
        if not _far_enough(navmap, tuple(res.targets[j]), others, d_safety):
            return int(j)
    return None


def one_hot_scores(actions, n_actions: int = N_ACTIONS) -> np.ndarray:
    """Preference vectors for planners that emit a single action (null -> all zeros)."""
    actions = np.asarray(actions, dtype=int)
    out = np.zeros((len(actions), n_actions))
    for j, a in enumerate(actions):
        if a != NULL_ACTION:
            out[j, a] = 1.0
    return out
