"""Physical push environment: five weighted objects on a 5x5 grid.

State layout is ``[x0, y0, x1, y1, ..., x4, y4]``.  Action ``a`` selects
object ``a // 5`` and move ``a % 5`` from ``MOVES``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base import FactoredEnv, GroundTruthGraph

MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0), (0, 0))  # up, down, left, right, stay
MOVE_NAMES = ("up", "down", "left", "right", "stay")


@dataclass(eq=False)
class PhysicalEnv(FactoredEnv):
    seed: int
    n_objects: int = 5
    grid: int = 5
    step_limit: int = 100
    ood_min_count: int = 3
    held_out_fraction: float = 0.2
    name: str = field(default="physical", init=False)

    def __post_init__(self):
        n, g = self.n_objects, self.grid
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xF1]))
        self.weights = rng.permutation(n) + 1
        d = 2 * n
        self.state_cardinalities = (g,) * d
        self.n_actions = n * len(MOVES)
        # any object can block or push any other, so every coordinate can
        # influence every other coordinate
        self.graph = GroundTruthGraph(np.ones((d, d), dtype=np.int64), np.ones((1, d), dtype=np.int64))
        n_held = int(round(self.held_out_fraction * g * g))
        self.held_out_cells = np.zeros((n, g, g), dtype=bool)
        for o in range(n):
            cells = rng.choice(g * g, size=n_held, replace=False)
            self.held_out_cells[o].flat[cells] = True
        self.targets = self._distinct_cells(rng)
        self.weights.setflags(write=False)
        self.held_out_cells.setflags(write=False)
        self.targets.setflags(write=False)

    def _distinct_cells(self, rng):
        cells = rng.choice(self.grid * self.grid, size=self.n_objects, replace=False)
        return np.stack([cells % self.grid, cells // self.grid], axis=1)

    # -- dynamics -------------------------------------------------------------

    def step(self, state, action):
        state = np.asarray(state, dtype=np.int64)
        pos = state.reshape(self.n_objects, 2).copy()
        k, m = divmod(int(action), len(MOVES))
        dx, dy = MOVES[m]
        if (dx, dy) == (0, 0):
            return pos.ravel()
        g = self.grid
        c1 = pos[k] + (dx, dy)
        if not (0 <= c1[0] < g and 0 <= c1[1] < g):
            return pos.ravel()
        hit = np.flatnonzero(np.all(pos == c1, axis=1))
        if hit.size == 0:
            pos[k] = c1
            return pos.ravel()
        other = int(hit[0])
        if self.weights[other] > self.weights[k]:
            return pos.ravel()
        c2 = c1 + (dx, dy)
        if not (0 <= c2[0] < g and 0 <= c2[1] < g):
            return pos.ravel()
        if np.any(np.all(pos == c2, axis=1)):
            return pos.ravel()
        pos[other] = c2
        pos[k] = c1
        return pos.ravel()

    def step_batch(self, states, actions):
        return np.stack([self.step(s, a) for s, a in zip(states, actions)])

    # -- task -------------------------------------------------------------------

    def reward(self, state, targets=None):
        targets = self.targets if targets is None else targets
        return float(push_reward(state, targets))

    def success(self, state):
        return bool(np.all(np.asarray(state).reshape(-1, 2) == self.targets))

    # -- state distributions ----------------------------------------------------

    def is_ood(self, state):
        pos = np.asarray(state).reshape(-1, self.n_objects, 2)
        objs = np.arange(self.n_objects)
        hits = self.held_out_cells[objs, pos[..., 0], pos[..., 1]]
        out = hits.sum(axis=-1) >= self.ood_min_count
        return out[0] if np.asarray(state).ndim == 1 else out

    def _random_placement(self, rng):
        return self._distinct_cells(rng).ravel()

    def sample_initial_state(self, rng):
        while True:
            s = self._random_placement(rng)
            if not self.is_ood(s):
                return s

    def sample_ood_state(self, rng):
        while True:
            s = self._random_placement(rng)
            if self.is_ood(s):
                return s

    def manifest(self):
        return {
            "env": "physical",
            "seed": self.seed,
            "state_cardinalities": list(self.state_cardinalities),
            "n_actions": self.n_actions,
            "step_limit": self.step_limit,
            "weights": [int(w) for w in self.weights],
            "targets": self.targets.tolist(),
            "held_out_cells": [np.argwhere(h).tolist() for h in self.held_out_cells],
            "ood_min_count": self.ood_min_count,
            "state_to_state": self.graph.state_to_state.tolist(),
            "action_to_state": self.graph.action_to_state.tolist(),
        }


def push_reward(state, targets):
    """Negated mean Manhattan distance between objects and their targets."""
    pos = np.asarray(state).reshape(-1, 2)
    targets = np.asarray(targets).reshape(-1, 2)
    return -np.abs(pos - targets).sum() / len(targets)


def generate_physical(seed: int, **kwargs):
    env = PhysicalEnv(seed=seed, **kwargs)
    return env, env.graph
