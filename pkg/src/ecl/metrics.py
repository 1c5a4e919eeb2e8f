"""Graph-recovery metrics, one-step and multi-step prediction accuracy, run summaries."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .models import CausalMask, _as_gates


@dataclass
class GraphMetrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    roc_auc: float

    def to_dict(self):
        return asdict(self)


def _labels(truth):
    return truth.full_adjacency() if hasattr(truth, "full_adjacency") else np.asarray(truth)


def roc_auc(scores, labels):
    """Normalised Mann-Whitney U; ties count one half.  ``nan`` if a class is empty."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(sorted_v):
        j = i
        while j + 1 < len(sorted_v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def candidate_mask(d, include_self=False):
    keep = np.ones((d + 1, d), dtype=bool)
    if not include_self:
        keep[np.arange(d), np.arange(d)] = False
    return keep


def graph_metrics(predicted: CausalMask, truth, include_self=False) -> GraphMetrics:
    """Binary edge metrics plus ROC-AUC of the continuous scores.

    The edge population is every (source, target) pair with sources being the
    state dims and the action; self edges are excluded unless ``include_self``.
    """
    pred = predicted.adjacency()
    lab = _labels(truth)
    if pred.shape != lab.shape:
        raise ValueError(f"predicted {pred.shape} and truth {lab.shape} shapes differ")
    keep = candidate_mask(pred.shape[1], include_self)
    p, t = pred[keep].astype(bool), lab[keep].astype(bool)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    acc = float(np.mean(p == t))
    rec = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    auc = roc_auc(predicted.scores[keep], t)
    return GraphMetrics(acc, rec, prec, f1, auc)


# -- prediction accuracy -------------------------------------------------------------

@dataclass
class PredictionDataset:
    """Rollouts of the true environment: ``states[:, t]`` for ``t = 0..H`` and ``actions[:, t]``."""

    states: np.ndarray
    actions: np.ndarray

    @property
    def horizon(self):
        return self.actions.shape[1]

    def __len__(self):
        return len(self.states)


def make_prediction_dataset(env, n, horizon, rng, ood=False):
    starts = [env.sample_ood_state(rng) if ood else env.sample_initial_state(rng) for _ in range(n)]
    s = np.array(starts, dtype=np.int64)
    acts = rng.integers(env.n_actions, size=(n, horizon))
    traj = [s]
    for t in range(horizon):
        s = env.step_batch(s, acts[:, t])
        traj.append(s)
    return PredictionDataset(np.stack(traj, axis=1), acts)


@dataclass
class PredictionReport:
    accuracy: list  # per horizon step, 1..H

    def to_dict(self):
        return {"accuracy": list(self.accuracy)}


def argmax_step(model, mask, states, actions):
    gates = _as_gates(model, mask)
    return np.argmax(model.index_logits(states, actions, gates), axis=-1).T


def prediction_accuracy(model, mask, dataset: PredictionDataset, horizon=None) -> PredictionReport:
    """Per-dimension top-1 accuracy, predictions fed back autoregressively."""
    horizon = dataset.horizon if horizon is None else horizon
    pred = dataset.states[:, 0]
    acc = []
    for t in range(horizon):
        pred = argmax_step(model, mask, pred, dataset.actions[:, t])
        acc.append(float(np.mean(pred == dataset.states[:, t + 1])))
    return PredictionReport(acc)


# -- run summaries ---------------------------------------------------------------------

def mean_stderr(values, axis=0):
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis]
    mean = values.mean(axis=axis)
    se = values.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def read_csv_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]}


def summarize_runs(run_dirs, out_dir, curve_name="curves.csv", x="episode", plot=True):
    """Aggregate curves and metrics over runs: mean and standard error per point.

    Writes ``summary_curves.csv`` (and ``summary_curves.png``) from each run's
    ``curve_name`` and ``summary_metrics.csv`` from each run's ``metrics.json``.
    Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    curves = [read_csv_columns(Path(r) / curve_name) for r in run_dirs if (Path(r) / curve_name).exists()]
    curves = [c for c in curves if c]
    if curves:
        n = min(len(c[x]) for c in curves)
        cols = [k for k in curves[0] if k != x]
        rows = {x: curves[0][x][:n]}
        for k in cols:
            mean, se = mean_stderr([c[k][:n] for c in curves])
            rows[f"{k}_mean"], rows[f"{k}_stderr"] = mean, se
        path = out_dir / "summary_curves.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(rows))
            for i in range(n):
                w.writerow([f"{rows[k][i]:.10g}" for k in rows])
        written.append(path)
        if plot and "task_reward" in cols:
            written.append(_plot_curve(rows, x, "task_reward", out_dir / "summary_curves.png", len(curves)))
    metrics = []
    for r in run_dirs:
        p = Path(r) / "metrics.json"
        if p.exists():
            metrics.append(_flatten(json.loads(p.read_text())))
    if metrics:
        keys = sorted(set.intersection(*[set(m) for m in metrics]))
        path = out_dir / "summary_metrics.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "stderr", "n"])
            for k in keys:
                mean, se = mean_stderr([m[k] for m in metrics])
                w.writerow([k, f"{mean:.10g}", f"{se:.10g}", len(metrics)])
        written.append(path)
    return written


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[key] = float(v)
        elif isinstance(v, list) and v and all(isinstance(e, (int, float)) for e in v):
            out.update({f"{key}.{i + 1}": float(e) for i, e in enumerate(v)})
    return out


def _plot_curve(rows, x, name, path, n_runs):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs, m, se = rows[x], rows[f"{name}_mean"], rows[f"{name}_stderr"]
    ax.plot(xs, m, lw=1.5)
    ax.fill_between(xs, m - se, m + se, alpha=0.3)
    ax.set_xlabel(x)
    ax.set_ylabel(name.replace("_", " "))
    ax.set_title(f"mean and standard error over {n_runs} run(s)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
