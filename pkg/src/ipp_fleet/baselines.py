"""Comparison planners: lawn mower (LMPP), random wanderer (RWPP) and GP-enhanced PSO.

Every planner proposes a preference vector per agent; the joint action is then
resolved by ``safe_consensus`` like the learned policy, so all planners share
one safety layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gridmap import DIRECTIONS, N_ACTIONS, NULL_ACTION, NavMap, apply_action, feasible_actions, reverse
from .learner.consensus import one_hot_scores

log = logging.getLogger(__name__)

PSO_INERTIA = 0.7
PSO_WEIGHTS = (1.0, 1.0, 1.0, 1.0)

_UNIT = DIRECTIONS / np.linalg.norm(DIRECTIONS, axis=1, keepdims=True)


@dataclass
class Proposal:
    scores: np.ndarray            # (N, 8) preferences
    stay: np.ndarray              # (N,) agents asking for the null action


class Planner:
    name = "planner"

    def reset(self, env, rng: np.random.Generator) -> None:
        self.rng = rng

    def propose(self, env) -> Proposal:
        raise NotImplementedError

    def update(self, env, result) -> None:
        """Called after the environment stepped with the consensus result."""

    def describe(self) -> dict:
        return {}


def _from_actions(actions) -> Proposal:
    actions = np.asarray(actions, dtype=int)
    return Proposal(one_hot_scores(actions), actions == NULL_ACTION)


# -- lawn mower --------------------------------------------------------------

AXES = (0, 2, 4, 6)   # S, E, N, W

def lmpp_step(navmap: NavMap, cell, heading: int, offset: int, rng: np.random.Generator):
    """One boustrophedon decision; returns ``(action, heading, offset)``.

    Keep the heading while it is free; at an obstacle shift one lane along the
    offset direction and reverse; if the shift is blocked too, draw a fresh
    feasible heading.
    """
    if apply_action(navmap, cell, heading) is not None:
        return heading, heading, offset
    if apply_action(navmap, cell, offset) is not None:
        return offset, reverse(heading), offset
    free = feasible_actions(navmap, cell)
    if not free:
        return NULL_ACTION, heading, offset
    axis = [a for a in free if a in AXES]
    pool = axis or free
    heading = int(pool[int(rng.integers(len(pool)))])
    offset = (heading + 2 * int(rng.choice([-1, 1]))) % N_ACTIONS
    log.debug("lmpp fallback at %s: fresh heading %d", tuple(cell), heading)
    return heading, heading, offset


class LawnMower(Planner):
    name = "lmpp"

    def reset(self, env, rng):
        super().reset(env, rng)
        n = env.n_agents
        # sweeps run along the grid axes; diagonal lanes strand at corners
        self.headings = [int(AXES[rng.integers(len(AXES))]) for _ in range(n)]
        # lanes stack perpendicular to the sweep, on a side fixed per agent
        self.offsets = [(h + 2 * int(rng.choice([-1, 1]))) % N_ACTIONS for h in self.headings]

    def propose(self, env):
        acts = []
        for j, cell in enumerate(env.state.positions):
            a, h, o = lmpp_step(env.navmap, cell, self.headings[j], self.offsets[j], self.rng)
            self.headings[j], self.offsets[j] = h, o
            acts.append(a)
        return _from_actions(acts)


# -- random wanderer ---------------------------------------------------------

def rwpp_step(navmap: NavMap, cell, heading: int, rng: np.random.Generator) -> int:
    if heading != NULL_ACTION and apply_action(navmap, cell, heading) is not None:
        return heading
    free = feasible_actions(navmap, cell)
    back = reverse(heading) if heading != NULL_ACTION else None
    options = [a for a in free if a != back]
    if options:
        return int(options[int(rng.integers(len(options)))])
    return back if back in free else NULL_ACTION


class RandomWanderer(Planner):
    name = "rwpp"

    def reset(self, env, rng):
        super().reset(env, rng)
        self.headings = [int(rng.integers(N_ACTIONS)) for _ in range(env.n_agents)]

    def propose(self, env):
        acts = [rwpp_step(env.navmap, cell, self.headings[j], self.rng)
                for j, cell in enumerate(env.state.positions)]
        return _from_actions(acts)

    def update(self, env, result):
        for j, a in enumerate(result.actions):
            if a != NULL_ACTION:
                self.headings[j] = int(a)


# -- particle swarm ----------------------------------------------------------

def angular_preferences(velocity) -> np.ndarray:
    """Cosine between ``velocity`` and each of the 8 unit directions."""
    v = np.asarray(velocity, dtype=float)
    return _UNIT @ (v / np.linalg.norm(v))


def snap_direction(navmap: NavMap, cell, velocity) -> int:
    """Feasible action nearest in angle to ``velocity``; null for a vanishing velocity."""
    if np.linalg.norm(velocity) < 1e-9:
        return NULL_ACTION
    prefs = angular_preferences(velocity)
    for a in np.argsort(-prefs, kind="stable"):
        if apply_action(navmap, cell, int(a)) is not None:
            return int(a)
    return NULL_ACTION


def pso_velocity(velocity, position, attractors, u, inertia=PSO_INERTIA,
                 weights=PSO_WEIGHTS) -> np.ndarray:
    p = np.asarray(position, dtype=float)
    v = inertia * np.asarray(velocity, dtype=float)
    for c, uk, att in zip(weights, u, attractors):
        v = v + c * uk * (np.asarray(att, dtype=float) - p)
    return v


@dataclass
class SwarmState:
    velocity: np.ndarray
    best_value: np.ndarray
    best_cell: np.ndarray
    fleet_value: float = -math.inf
    fleet_cell: Optional[np.ndarray] = None


class ParticleSwarm(Planner):
    """GP-enhanced PSO: attractors are the σ̂ peak, personal and fleet best samples and the μ̂ peak."""

    name = "pso"

    def __init__(self, inertia: float = PSO_INERTIA, weights=PSO_WEIGHTS):
        self.inertia = float(inertia)
        self.weights = tuple(float(w) for w in weights)
        if len(self.weights) != 4:
            raise ValueError("PSO needs four attractor weights")

    def describe(self):
        return {"pso_inertia": self.inertia, "pso_weights": " ".join(map(str, self.weights))}

    def reset(self, env, rng):
        super().reset(env, rng)
        n = env.n_agents
        self.swarm = SwarmState(np.zeros((n, 2)), np.full(n, -math.inf),
                                np.array(env.state.positions, dtype=int))
        self._record(env)

    def _record(self, env):
        s = self.swarm
        for j, (cell, y) in enumerate(zip(env.state.positions, env.last_measurements)):
            if y > s.best_value[j]:
                s.best_value[j], s.best_cell[j] = y, cell
            if y > s.fleet_value:
                s.fleet_value, s.fleet_cell = float(y), np.array(cell)

    def attractors(self, env, j):
        model, cells = env.state.model, env.navmap.cells
        s = self.swarm
        return (cells[int(np.argmax(model.fused_std_))], s.best_cell[j], s.fleet_cell,
                cells[int(np.argmax(model.fused_mean_))])

    def propose(self, env):
        n = env.n_agents
        scores = np.zeros((n, N_ACTIONS))
        stay = np.zeros(n, dtype=bool)
        for j, cell in enumerate(env.state.positions):
            u = self.rng.random(4)
            v = pso_velocity(self.swarm.velocity[j], cell, self.attractors(env, j), u,
                             self.inertia, self.weights)
            self.swarm.velocity[j] = v
            if np.linalg.norm(v) < 1e-9:
                stay[j] = True
            else:
                # graded by angle so blocked choices fall back to the nearest direction
                scores[j] = angular_preferences(v)
        return Proposal(scores, stay)

    def update(self, env, result):
        self._record(env)


PLANNERS = {"lmpp": LawnMower, "rwpp": RandomWanderer, "pso": ParticleSwarm}


def make_planner(name: str, **kw) -> Planner:
    try:
        cls = PLANNERS[name]
    except KeyError:
        raise ValueError(f"unknown planner {name!r}") from None
    return cls(**kw)
