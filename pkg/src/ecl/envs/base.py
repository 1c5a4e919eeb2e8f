"""Shared pieces for the synthetic factored environments."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class GroundTruthGraph:
    """Adjacency of the one-step transition graph.

    ``state_to_state[i, j] == 1`` iff ``s^i_t -> s^j_{t+1}``;
    ``action_to_state[0, j] == 1`` iff ``a_t -> s^j_{t+1}``.
    """

    state_to_state: np.ndarray
    action_to_state: np.ndarray

    def __post_init__(self):
        self.state_to_state = np.asarray(self.state_to_state, dtype=np.int64)
        self.action_to_state = np.asarray(self.action_to_state, dtype=np.int64).reshape(1, -1)
        d = self.state_to_state.shape[0]
        if self.state_to_state.shape != (d, d) or self.action_to_state.shape != (1, d):
            raise ValueError("inconsistent graph shapes")
        if not np.all(np.diag(self.state_to_state) == 1):
            raise ValueError("every state variable must keep its self edge")

    @property
    def n_dims(self):
        return self.state_to_state.shape[0]

    def full_adjacency(self):
        """``(d + 1, d)`` matrix: state sources then the action row."""
        return np.vstack([self.state_to_state, self.action_to_state])

    def n_state_edges(self):
        return int(self.state_to_state.sum())

    def to_csv(self, path):
        write_matrix_csv(path, self.full_adjacency(), fmt="%d")


def write_matrix_csv(path, matrix, fmt="%.17g"):
    """Rows are sources (state dims, then ``a``), columns are target dims."""
    matrix = np.asarray(matrix)
    d = matrix.shape[1]
    rows = [f"s{i}" for i in range(matrix.shape[0] - 1)] + ["a"]
    with open(path, "w") as fh:
        fh.write("source," + ",".join(f"s{j}" for j in range(d)) + "\n")
        for name, row in zip(rows, matrix):
            fh.write(name + "," + ",".join(fmt % v for v in row) + "\n")


def read_matrix_csv(path, dtype=float):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    return np.array([[dtype(v) for v in ln.split(",")[1:]] for ln in lines[1:]])


def reachable_from(adj: np.ndarray, sources):
    """Nodes reachable from ``sources`` along ``adj[i, j]`` edges (sources excluded unless on a cycle)."""
    d = adj.shape[0]
    off = adj.copy()
    np.fill_diagonal(off, 0)
    seen = np.zeros(d, dtype=bool)
    frontier = list(sources)
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(off[i]):
            if not seen[j]:
                seen[j] = True
                frontier.append(j)
    return seen


class FactoredEnv:
    """Interface shared by the chemical and physical environments.

    States are integer vectors; the environment object is immutable and
    stepping is pure.
    """

    name = "env"
    state_cardinalities: tuple
    n_actions: int
    step_limit: int
    graph: GroundTruthGraph

    @property
    def n_dims(self):
        return len(self.state_cardinalities)

    def step(self, state, action):
        raise NotImplementedError

    def reward(self, state):
        raise NotImplementedError

    def success(self, state):
        raise NotImplementedError

    def sample_initial_state(self, rng):
        raise NotImplementedError

    def is_ood(self, state):
        raise NotImplementedError

    def reward_dims(self):
        return list(range(self.n_dims))

    def manifest(self):
        raise NotImplementedError

    def write_manifest(self, path):
        data = self.manifest()
        with open(path, "w") as fh:
            for key, value in data.items():
                fh.write(f"{key} = {json.dumps(value)}\n")
        return Path(path)


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = json.loads(value)
    return out
