"""Chemical color-change environment with chain / collider / full graphs.

Ten objects each carry one of five colors.  An action ``(k, c)`` paints object
``k`` with color ``c``; every strict descendant ``j`` of ``k`` then reacts:
its new color is the argmax of a frozen random network applied to the one-hot
colors of ``j`` and its parents *at time t*.  Objects that do not descend from
``k`` keep their color.  This makes ``s_{t+1}^j`` a function of ``a_t``,
``s_t^j`` and ``s_t^{PA(j)}`` only, so the declared graph is exactly the one
expressed by the transitions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn import MlpSpec, ParameterSet, forward
from .base import FactoredEnv, GroundTruthGraph, reachable_from

TOPOLOGIES = ("chain", "collider", "full")


def topology_adjacency(topology: str, n: int) -> np.ndarray:
    adj = np.eye(n, dtype=np.int64)
    if topology == "chain":
        for i in range(n - 1):
            adj[i, i + 1] = 1
    elif topology == "collider":
        adj[: n - 1, n - 1] = 1
    elif topology == "full":
        adj[np.triu_indices(n, k=1)] = 1
    else:
        raise ValueError(f"unknown topology {topology!r}; expected one of {TOPOLOGIES}")
    return adj


@dataclass(eq=False)
class ChemicalEnv(FactoredEnv):
    topology: str
    seed: int
    n_objects: int = 10
    n_colors: int = 5
    step_limit: int = 50
    hidden_width: int = 32
    weight_scale: float = 2.0
    ood_min_count: int = 4
    goal_walk: int = 30
    name: str = field(default="chemical", init=False)

    def __post_init__(self):
        n, K = self.n_objects, self.n_colors
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xC4E1]))
        adj = topology_adjacency(self.topology, n)
        self.graph = GroundTruthGraph(adj, np.ones((1, n), dtype=np.int64))
        self.state_cardinalities = (K,) * n
        self.n_actions = n * K
        self.parents = [tuple(int(i) for i in np.flatnonzero(adj[:, j]) if i != j) for j in range(n)]
        # descends[k, j]: j reacts when k is painted
        self.descends = np.stack([reachable_from(adj, [k]) for k in range(n)])
        self.nets = {}
        for j in range(n):
            if not self.parents[j]:
                continue
            spec = MlpSpec(K * (1 + len(self.parents[j])), (self.hidden_width,), K)
            params = ParameterSet.init(spec, rng, scale=self.weight_scale)
            params.biases = [rng.normal(0.0, 0.5, size=b.shape) for b in params.biases]
            self.nets[j] = (spec, params)
        self.held_out = rng.integers(0, K, size=n)
        self.goal = self._sample_goal(rng)
        self._freeze()

    def _freeze(self):
        for spec, params in self.nets.values():
            for a in params.arrays():
                a.setflags(write=False)
        self.held_out.setflags(write=False)
        self.goal.setflags(write=False)

    # -- dynamics -------------------------------------------------------------

    def react(self, j, states):
        """Color object ``j`` would take given time-t colors ``states`` (batch)."""
        spec, params = self.nets[j]
        cols = (j,) + self.parents[j]
        x = np.zeros((states.shape[0], spec.input_width))
        rows = np.arange(states.shape[0])
        for slot, i in enumerate(cols):
            x[rows, slot * self.n_colors + states[:, i]] = 1.0
        return np.argmax(forward(spec, params, x), axis=-1)

    def step_batch(self, states, actions):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        k, c = np.divmod(actions, self.n_colors)
        nxt = states.copy()
        triggered = self.descends[k]
        for j in self.nets:
            rows = np.flatnonzero(triggered[:, j])
            if rows.size:
                nxt[rows, j] = self.react(j, states[rows])
        nxt[np.arange(len(k)), k] = c
        return nxt

    def step(self, state, action):
        return self.step_batch(np.asarray(state)[None], [action])[0]

    # -- task -------------------------------------------------------------------

    def reward(self, state, goal=None):
        goal = self.goal if goal is None else goal
        return float(match_reward(state, goal))

    def success(self, state):
        return bool(np.all(np.asarray(state) == self.goal))

    # -- state distributions ----------------------------------------------------

    def is_ood(self, state):
        state = np.asarray(state)
        return np.sum(state == self.held_out, axis=-1) >= self.ood_min_count

    def sample_initial_state(self, rng):
        while True:
            s = rng.integers(0, self.n_colors, size=self.n_objects)
            if not self.is_ood(s):
                return s

    def sample_ood_state(self, rng):
        while True:
            s = rng.integers(0, self.n_colors, size=self.n_objects)
            if self.is_ood(s):
                return s

    def _sample_goal(self, rng):
        while True:
            s = self.sample_initial_state(rng)
            ok = True
            for _ in range(self.goal_walk):
                s = self.step(s, rng.integers(self.n_actions))
                if self.is_ood(s):
                    ok = False
                    break
            if ok:
                return s

    def manifest(self):
        return {
            "env": "chemical",
            "topology": self.topology,
            "seed": self.seed,
            "state_cardinalities": list(self.state_cardinalities),
            "n_actions": self.n_actions,
            "step_limit": self.step_limit,
            "goal": [int(v) for v in self.goal],
            "held_out_colors": [int(v) for v in self.held_out],
            "ood_min_count": self.ood_min_count,
            "state_to_state": self.graph.state_to_state.tolist(),
            "action_to_state": self.graph.action_to_state.tolist(),
        }


def match_reward(state, goal):
    """Number of objects whose color equals the goal color."""
    state, goal = np.asarray(state), np.asarray(goal)
    if state.shape[-1] != goal.shape[-1]:
        raise ValueError("state and goal must have the same length")
    return np.sum(state == goal, axis=-1)


def generate_chemical(seed: int, topology: str, **kwargs):
    env = ChemicalEnv(topology=topology, seed=seed, **kwargs)
    return env, env.graph
