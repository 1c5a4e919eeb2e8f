from .base import FactoredEnv, GroundTruthGraph, read_manifest, read_matrix_csv, write_matrix_csv
from .chemical import ChemicalEnv, TOPOLOGIES, generate_chemical, match_reward
from .physical import PhysicalEnv, generate_physical, push_reward

__all__ = ["FactoredEnv", "GroundTruthGraph", "read_manifest", "read_matrix_csv", "write_matrix_csv", "ChemicalEnv",
           "TOPOLOGIES", "generate_chemical", "match_reward", "PhysicalEnv", "generate_physical", "push_reward",
           "make_env"]


def make_env(kind: str, seed: int, topology: str = "chain"):
    """Build an environment from a config-style ``kind`` string."""
    if kind == "chemical":
        return generate_chemical(seed, topology)[0]
    if kind == "physical":
        return generate_physical(seed)[0]
    raise ValueError(f"unknown environment {kind!r}")

