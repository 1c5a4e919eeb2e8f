import numpy as np
import pytest

from ecl.envs import generate_chemical
from ecl.models import ReplayBuffer


def random_buffer(env, n, seed=0):
    """Uniform-random-action transitions from in-distribution starts."""
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(env.state_cardinalities, env.n_actions, capacity=max(n, 1))
    s = env.sample_initial_state(rng)
    for t in range(n):
        if t % env.step_limit == 0:
            s = env.sample_initial_state(rng)
        a = int(rng.integers(env.n_actions))
        s2 = env.step(s, a)
        buf.add(s, a, env.reward(s), s2, t // env.step_limit, t % env.step_limit)
        s = s2
    return buf


@pytest.fixture(scope="session")
def chain_env():
    return generate_chemical(0, "chain")[0]


@pytest.fixture(scope="session")
def small_chain_env():
    """Four objects with three colors: small enough for exhaustive checks."""
    return generate_chemical(0, "chain", n_objects=4, n_colors=3)[0]


def tiny_config(env="chemical", topology="chain", **sections):
    """Every budget shrunk so a whole pipeline runs in seconds."""
    from ecl.config import ExperimentConfig

    base = {
        "network": {"dynamics_hidden": (8,), "reward_hidden": (8,)},
        "training": {"dynamics_steps": 60, "reward_steps": 20},
        "collect": {"transitions": 400, "quick_model_steps": 20, "quick_discovery_rounds": 2},
        "discovery": {"n_eval_rounds": 3, "score_steps": 20, "score_start_step": 5},
        "empowerment": {"epochs": 2, "episodes_per_epoch": 1, "horizon": 10, "updates_per_epoch": 2,
                        "trace_states": 2, "reward_steps": 5, "policy_hidden": (8,)},
        "planner": {"num_candidates": 8, "num_elites": 4, "num_iterations": 2, "horizon": 2},
        "task": {"episodes": 2, "reward_update_every": 1, "reward_update_steps": 5, "simultaneous_every": 1,
                 "simultaneous_steps": 5},
        "eval": {"n_transitions": 50, "horizon": 2},
    }
    for name, over in sections.items():
        base.setdefault(name, {}).update(over)
    return ExperimentConfig.for_env(env, topology, **base)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
