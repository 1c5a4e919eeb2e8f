import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecl.envs.base import GroundTruthGraph
from ecl.metrics import (
    argmax_step, graph_metrics, make_prediction_dataset, mean_stderr, prediction_accuracy, read_csv_columns, roc_auc,
    summarize_runs,
)
from ecl.models import CausalMask, DynamicsModel
from ecl.planner import write_curves_csv


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_perfect_prediction(chain_env):
    m = graph_metrics(CausalMask.from_adjacency(chain_env.graph.full_adjacency()), chain_env.graph)
    assert (m.accuracy, m.recall, m.precision, m.f1, m.roc_auc) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_hand_counted_metrics():
    truth = np.array([[1, 1, 0], [0, 1, 1], [0, 0, 1], [1, 0, 0]])  # (d+1, d) with d = 3
    pred = np.array([[1, 1, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0]])
    scores = pred * 2.0 + np.arange(12).reshape(4, 3) * 0.01
    m = graph_metrics(CausalMask.from_adjacency(pred, scores), truth)
    # nine off-diagonal pairs: tp = 2 (0->1, a->0), fp = 2 (0->2, 2->1), fn = 1 (1->2)
    assert m.precision == pytest.approx(0.5)
    assert m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 * 0.5 * (2 / 3) / (0.5 + 2 / 3))
    assert m.accuracy == pytest.approx(6 / 9)
    keep = ~np.vstack([np.eye(3, dtype=bool), np.zeros((1, 3), dtype=bool)])
    assert m.roc_auc == pytest.approx(brute_auc(scores[keep], truth[keep].astype(bool)))


def test_empty_prediction_has_zero_f1():
    truth = np.array([[1, 1], [0, 1], [0, 0]])
    m = graph_metrics(CausalMask.from_adjacency(np.eye(3, 2, dtype=int)), truth)
    assert m.f1 == 0.0 and m.recall == 0.0 and m.precision == 0.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        graph_metrics(CausalMask.full(2), np.ones((4, 3)))


def test_self_edges_optional():
    truth = np.array([[1, 0], [0, 1], [1, 1]])
    pred = CausalMask.from_adjacency(np.array([[1, 0], [0, 1], [1, 1]]))
    assert graph_metrics(pred, truth).f1 == 1.0
    assert graph_metrics(pred, truth, include_self=True).accuracy == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pairwise_count(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.all() or not labels.any():
        assert np.isnan(roc_auc(scores, labels))
    else:
        assert roc_auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_prediction_dataset_follows_env(chain_env):
    ds = make_prediction_dataset(chain_env, 20, 3, np.random.default_rng(0))
    assert ds.states.shape == (20, 4, 10) and ds.actions.shape == (20, 3) and len(ds) == 20
    for n in range(20):
        for t in range(3):
            np.testing.assert_array_equal(chain_env.step(ds.states[n, t], ds.actions[n, t]), ds.states[n, t + 1])
    ood = make_prediction_dataset(chain_env, 10, 1, np.random.default_rng(1), ood=True)
    assert np.all(chain_env.is_ood(ood.states[:, 0]))


def test_prediction_accuracy_autoregressive(small_chain_env):
    env = small_chain_env
    m = DynamicsModel(env.state_cardinalities, env.n_actions, (8,), rng=np.random.default_rng(0))
    ds = make_prediction_dataset(env, 30, 3, np.random.default_rng(0))
    rep = prediction_accuracy(m, None, ds)
    pred, expect = ds.states[:, 0], []
    for t in range(3):
        pred = argmax_step(m, None, pred, ds.actions[:, t])
        expect.append(np.mean(pred == ds.states[:, t + 1]))
    np.testing.assert_allclose(rep.accuracy, expect)
    assert len(prediction_accuracy(m, None, ds, horizon=1).accuracy) == 1


def test_mean_stderr():
    mean, se = mean_stderr([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_allclose(mean, [2.0, 4.0])
    np.testing.assert_allclose(se, [np.std([1, 3], ddof=1) / np.sqrt(2), np.std([2, 6], ddof=1) / np.sqrt(2)])
    assert mean_stderr([[5.0]])[1][0] == 0.0


def test_summarize_runs(tmp_path):
    dirs = []
    for k in range(3):
        d = tmp_path / f"seed_{k}"
        d.mkdir()
        recs = [{"episode": e + 1, "task_reward": float(k + e), "final_reward": 0.0, "shaped_reward_mean": 0.0,
                 "curiosity_mean": 0.0, "success": 0} for e in range(4)]
        write_curves_csv(d / "curves.csv", recs)
        (d / "metrics.json").write_text(json.dumps({"graph": {"f1": 0.5 + 0.1 * k}, "name": "skip"}))
        dirs.append(d)
    written = summarize_runs(dirs, tmp_path / "report")
    names = sorted(p.name for p in written)
    assert names == ["summary_curves.csv", "summary_curves.png", "summary_metrics.csv"]
    curves = read_csv_columns(tmp_path / "report" / "summary_curves.csv")
    np.testing.assert_allclose(curves["task_reward_mean"], [1, 2, 3, 4])
    np.testing.assert_allclose(curves["task_reward_stderr"], np.full(4, 1 / np.sqrt(3)))
    text = (tmp_path / "report" / "summary_metrics.csv").read_text()
    assert "graph.f1,0.6," in text and "name" not in text


def test_ground_truth_counts(chain_env):
    assert isinstance(chain_env.graph, GroundTruthGraph)
    assert graph_metrics(CausalMask.full(10), chain_env.graph).recall == 1.0
