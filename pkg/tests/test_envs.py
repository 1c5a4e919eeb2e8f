import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecl.envs import (
    TOPOLOGIES, generate_chemical, generate_physical, make_env, match_reward, push_reward, read_manifest,
    read_matrix_csv,
)
from ecl.envs.physical import MOVES


@pytest.fixture(scope="module", params=TOPOLOGIES)
def chem(request):
    return generate_chemical(3, request.param)[0]


@pytest.fixture(scope="module")
def phys():
    return generate_physical(3)[0]


def replay_step(env, state, action):
    """Independent recomputation: paint, then update descendants in topological order from time-t colors."""
    k, c = divmod(int(action), env.n_colors)
    old = np.array(state)
    new = old.copy()
    adj = env.graph.state_to_state
    stack, seen = [k], set()
    while stack:
        i = stack.pop()
        for j in range(env.n_objects):
            if j != i and adj[i, j] and j not in seen:
                seen.add(j)
                stack.append(j)
    for j in sorted(seen):
        new[j] = env.react(j, old[None])[0]
    new[k] = c
    return new


def test_edge_counts():
    assert generate_chemical(0, "chain")[1].n_state_edges() == 19
    assert generate_chemical(0, "full")[1].n_state_edges() == 55
    col = generate_chemical(0, "collider")[1]
    assert col.n_state_edges() == 19
    assert np.all(col.state_to_state[:9, 9] == 1)
    assert np.all(col.action_to_state == 1)


def test_unknown_topology():
    with pytest.raises(ValueError):
        generate_chemical(0, "ring")
    with pytest.raises(ValueError):
        make_env("marbles", 0)


def test_same_seed_same_env():
    a, b = generate_chemical(5, "full")[0], generate_chemical(5, "full")[0]
    np.testing.assert_array_equal(a.goal, b.goal)
    for j in a.nets:
        assert a.nets[j][1].flat().tobytes() == b.nets[j][1].flat().tobytes()
    c = generate_chemical(6, "full")[0]
    assert any(a.nets[j][1].flat().tobytes() != c.nets[j][1].flat().tobytes() for j in a.nets)


def test_generators_frozen(chem):
    spec, params = next(iter(chem.nets.values()))
    with pytest.raises(ValueError):
        params.weights[0][0, 0] = 1.0


def test_intervened_object_takes_color(chem):
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = chem.sample_initial_state(rng)
        a = int(rng.integers(chem.n_actions))
        assert chem.step(s, a)[a // chem.n_colors] == a % chem.n_colors


def test_non_descendants_unchanged(chem):
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = chem.sample_initial_state(rng)
        a = int(rng.integers(chem.n_actions))
        k = a // chem.n_colors
        keep = ~chem.descends[k]
        keep[k] = False
        np.testing.assert_array_equal(chem.step(s, a)[keep], s[keep])


def test_replay_oracle(chem):
    rng = np.random.default_rng(2)
    s = chem.sample_initial_state(rng)
    for _ in range(100):
        a = int(rng.integers(chem.n_actions))
        nxt = chem.step(s, a)
        np.testing.assert_array_equal(nxt, replay_step(chem, s, a))
        s = nxt


def test_chemical_respects_graph(chem):
    """Perturbing a non-parent of s^j never changes s^j at the next step."""
    rng = np.random.default_rng(4)
    adj = chem.graph.state_to_state
    for _ in range(1000):
        s = rng.integers(chem.n_colors, size=chem.n_objects)
        a = int(rng.integers(chem.n_actions))
        i = int(rng.integers(chem.n_objects))
        s2 = s.copy()
        s2[i] = (s[i] + 1 + rng.integers(chem.n_colors - 1)) % chem.n_colors
        base, pert = chem.step(s, a), chem.step(s2, a)
        for j in np.flatnonzero(adj[i] == 0):
            assert base[j] == pert[j]


def test_batch_matches_single(chem):
    rng = np.random.default_rng(5)
    s = rng.integers(chem.n_colors, size=(20, chem.n_objects))
    a = rng.integers(chem.n_actions, size=20)
    batch = chem.step_batch(s, a)
    for k in range(20):
        np.testing.assert_array_equal(batch[k], chem.step(s[k], a[k]))


def test_determinism_bit_exact():
    rng = np.random.default_rng(0)
    actions = rng.integers(50, size=60)
    trajs = []
    for _ in range(2):
        env = generate_chemical(9, "chain")[0]
        s = env.sample_initial_state(np.random.default_rng(1))
        traj = [s]
        for a in actions:
            s = env.step(s, a)
            traj.append(s)
        trajs.append(np.array(traj))
    assert trajs[0].tobytes() == trajs[1].tobytes()


def test_match_reward_examples():
    goal = np.arange(10) % 5
    assert match_reward(goal, goal) == 10
    assert match_reward((goal + 1) % 5, goal) == 0
    s = (goal + 1) % 5
    s[[1, 4, 7]] = goal[[1, 4, 7]]
    assert match_reward(s, goal) == 3
    with pytest.raises(ValueError):
        match_reward(np.zeros(3), np.zeros(4))


@given(st.lists(st.integers(0, 4), min_size=10, max_size=10), st.lists(st.integers(0, 4), min_size=10, max_size=10))
def test_match_reward_range(s, g):
    assert 0 <= match_reward(s, g) <= 10


def test_goal_is_in_distribution(chem):
    assert not chem.is_ood(chem.goal)


def test_ood_partition(chem):
    rng = np.random.default_rng(6)
    ood = np.array([chem.sample_ood_state(rng) for _ in range(5000)])
    assert np.all(chem.is_ood(ood))
    ind = np.array([chem.sample_initial_state(rng) for _ in range(500)])
    assert not np.any(chem.is_ood(ind))
    # the two samplers draw from disjoint regions
    assert not set(map(bytes, ood.astype(np.int8))) & set(map(bytes, ind.astype(np.int8)))


def test_manifest_round_trip(tmp_path, chem):
    chem.write_manifest(tmp_path / "env.txt")
    back = read_manifest(tmp_path / "env.txt")
    assert back["goal"] == chem.goal.tolist()
    assert back["state_to_state"] == chem.graph.state_to_state.tolist()
    chem.graph.to_csv(tmp_path / "g.csv")
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "g.csv", int), chem.graph.full_adjacency())


# -- physical -----------------------------------------------------------------------------

def _place(env, cells):
    return np.array(cells, dtype=np.int64).ravel()


def test_physical_shapes(phys):
    assert phys.n_actions == 25
    assert phys.state_cardinalities == (5,) * 10
    assert sorted(phys.weights.tolist()) == [1, 2, 3, 4, 5]


def test_move_into_empty_cell(phys):
    s = _place(phys, [(0, 0), (4, 4), (2, 4), (4, 0), (0, 4)])
    up = MOVES.index((0, 1))
    nxt = phys.step(s, 0 * 5 + up)
    expect = s.copy()
    expect[1] = 1
    np.testing.assert_array_equal(nxt, expect)


def test_heavy_pushes_light_and_light_cannot_push_heavy(phys):
    heavy, light = int(np.argmax(phys.weights)), int(np.argmin(phys.weights))
    others = [o for o in range(5) if o not in (heavy, light)]
    cells = [None] * 5
    cells[heavy], cells[light] = (1, 2), (2, 2)
    for o, c in zip(others, [(0, 0), (0, 4), (4, 4)]):
        cells[o] = c
    s = _place(phys, cells)
    right, left = MOVES.index((1, 0)), MOVES.index((-1, 0))
    pushed = phys.step(s, heavy * 5 + right).reshape(5, 2)
    assert tuple(pushed[heavy]) == (2, 2) and tuple(pushed[light]) == (3, 2)
    np.testing.assert_array_equal(phys.step(s, light * 5 + left), s)


def test_boundary_and_double_push_block(phys):
    heavy = int(np.argmax(phys.weights))
    rest = [o for o in range(5) if o != heavy]
    cells = [None] * 5
    cells[heavy] = (0, 0)
    for o, c in zip(rest, [(1, 0), (2, 0), (4, 4), (3, 4)]):
        cells[o] = c
    s = _place(phys, cells)
    left, right = MOVES.index((-1, 0)), MOVES.index((1, 0))
    np.testing.assert_array_equal(phys.step(s, heavy * 5 + left), s)  # wall
    np.testing.assert_array_equal(phys.step(s, heavy * 5 + right), s)  # two objects in a row


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_physical_invariants(seed):
    env = generate_physical(seed % 7)[0]
    rng = np.random.default_rng(seed)
    s = env.sample_initial_state(rng)
    for _ in range(30):
        s = env.step(s, int(rng.integers(env.n_actions)))
        pos = s.reshape(5, 2)
        assert np.all((pos >= 0) & (pos < 5))
        assert len({tuple(p) for p in pos}) == 5
        assert -8 <= env.reward(s) <= 0


def test_push_reward_examples(phys):
    t = phys.targets
    assert push_reward(t.ravel(), t) == 0
    s = t.copy()
    s[0] = s[0] + np.array([3, 0]) if s[0, 0] < 2 else s[0] - np.array([3, 0])
    assert push_reward(s.ravel(), t) == pytest.approx(-0.6)
    assert phys.success(t.ravel())


def test_physical_ood_partition(phys):
    rng = np.random.default_rng(0)
    ood = np.array([phys.sample_ood_state(rng) for _ in range(2000)])
    assert np.all(phys.is_ood(ood))
    ind = np.array([phys.sample_initial_state(rng) for _ in range(500)])
    assert not np.any(phys.is_ood(ind))
