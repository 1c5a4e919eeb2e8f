"""End-to-end orchestration: environment, collection, the three learning steps, evaluation, reports.

Every phase reads its inputs from the run directory and writes its outputs
back, so an interrupted pipeline resumes from the last completed phase and
produces the same files as an uninterrupted one.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .discovery import discover
from .empowerment import ExplorationPolicy, alternate_optimize, write_trace_csv
from .envs import make_env
from .envs.base import GroundTruthGraph, read_matrix_csv
from .metrics import graph_metrics, make_prediction_dataset, prediction_accuracy, read_csv_columns, summarize_runs
from .models import (CausalMask, DropoutSchedule, DynamicsModel, ReplayBuffer, RewardModel,
                     train_dynamics, train_reward, transition_log_likelihood)
from .planner import (ShapedRewardConfig, run_random_policy, run_task_policy, write_curves_csv,
                      write_success_csv)
from .rng import stream, stream_log

log = logging.getLogger("ecl")

OUTPUT_ROOT_VAR = "ECL_OUTPUT_ROOT"
PHASES = ("generate-env", "collect", "step1", "step2", "step3", "eval")
MANIFEST = "manifest.json"
UNTRACKED = {MANIFEST, "run.log"}


def default_output_root():
    return Path(os.environ.get(OUTPUT_ROOT_VAR, "runs"))


def run_dir_for(out_root, seed):
    return Path(out_root) / f"seed_{seed}"


def collect_reward(dense_loglik, causal_loglik):
    """``tanh(sum_j [log p_dense - log p_causal])`` over the last axis."""
    diff = np.asarray(dense_loglik, dtype=np.float64) - np.asarray(causal_loglik, dtype=np.float64)
    return np.tanh(np.sum(diff, axis=-1))


# -- manifest ----------------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Config hash, code version, per-phase wall time and the registry of emitted files."""

    def __init__(self, run_dir, config_hash, seed):
        self.path = Path(run_dir) / MANIFEST
        self.data = {"config_hash": config_hash, "code_version": __version__, "seed": seed,
                     "streams": stream_log(seed), "phases": {}, "outputs": {}}

    @classmethod
    def open(cls, run_dir, config_hash, seed):
        m = cls(run_dir, config_hash, seed)
        if m.path.exists():
            old = json.loads(m.path.read_text())
            if old.get("config_hash") == config_hash and old.get("seed") == seed:
                m.data = old
        return m

    def completed(self, phase):
        return self.data["phases"].get(phase, {}).get("completed", False)

    def record(self, phase, files, wall_time):
        run_dir = self.path.parent
        for f in files:
            rel = str(Path(f).relative_to(run_dir))
            self.data["outputs"][rel] = sha256_file(f)
        self.data["phases"][phase] = {"completed": True, "wall_time": round(wall_time, 3),
                                      "outputs": sorted(str(Path(f).relative_to(run_dir)) for f in files)}
        self.save()

    def save(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        tmp.replace(self.path)

    def checksums(self):
        return dict(sorted(self.data["outputs"].items()))


# -- helpers ----------------------------------------------------------------------------------

def _env(cfg):
    return lambda seed: make_env(cfg.experiment.env, seed, cfg.experiment.topology)


def _truth(run_dir):
    adj = read_matrix_csv(Path(run_dir) / "ground_truth.csv", dtype=int)
    return GroundTruthGraph(adj[:-1], adj[-1:])


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
    return Path(path)


def _require(run_dir, *names):
    for n in names:
        if not (Path(run_dir) / n).exists():
            raise FileNotFoundError(f"{Path(run_dir) / n} is missing; run the earlier phases first")


def _schedule(cfg):
    t = cfg.training
    return DropoutSchedule(t.dropout_full, t.dropout_leave_one_out, t.dropout_bernoulli)


def _reward_kwargs(cfg):
    return {"batch_size": cfg.training.reward_batch_size, "learning_rate": cfg.training.reward_learning_rate}


def _load_mask(run_dir, name):
    return CausalMask.from_csv(Path(run_dir) / f"{name}.csv", Path(run_dir) / f"{name}_scores.csv")


def _save_mask(run_dir, name, mask):
    a, b = Path(run_dir) / f"{name}.csv", Path(run_dir) / f"{name}_scores.csv"
    mask.to_csv(a, b)
    return [a, b]


# -- collection -------------------------------------------------------------------------------

def coverage_triples(cards, n_actions):
    return np.zeros((len(cards), max(cards), n_actions), dtype=bool)


def collect_transitions(env, cfg: ExperimentConfig, rng):
    """Uniform warm-up, then an epsilon-greedy bandit on the collection reward.

    The bandit keeps a running mean of ``collect_reward`` per (state-hash
    bucket, action); epsilon decays linearly from ``epsilon_start`` to
    ``epsilon_end`` over the post-warm-up budget.  Transitions that would
    enter the held-out region end the episode and are not recorded.
    Returns ``(buffer, stats)``.
    """
    c = cfg.collect
    budget = c.transitions
    buf = ReplayBuffer(env.state_cardinalities, env.n_actions, capacity=max(budget, 1))
    A, d = env.n_actions, env.n_dims
    cover = coverage_triples(env.state_cardinalities, A)
    coverage_trace = []
    warmup = int(round(c.warmup_fraction * budget))
    q = np.zeros((c.n_buckets, A))
    n = np.zeros((c.n_buckets, A))
    model = mask = None
    rewards = []
    ep, t = 0, 0
    s = env.sample_initial_state(rng) if budget else None
    while len(buf) < budget:
        if model is None and len(buf) >= warmup and warmup >= cfg.training.batch_size and len(buf) < budget:
            model, mask = _quick_model(env, buf, cfg, rng)
        if model is None:
            a = int(rng.integers(A))
            eps = 1.0
        else:
            frac = (len(buf) - warmup) / max(budget - warmup, 1)
            eps = c.epsilon_start + (c.epsilon_end - c.epsilon_start) * frac
            bucket = zlib.crc32(np.asarray(s, dtype=np.int64).tobytes()) % c.n_buckets
            if rng.random() < eps:
                a = int(rng.integers(A))
            else:
                best = np.flatnonzero(q[bucket] == q[bucket].max())
                a = int(rng.choice(best))
        s2 = env.step(s, a)
        if env.is_ood(s2) or t >= env.step_limit:
            ep, t = ep + 1, 0
            s = env.sample_initial_state(rng)
            continue
        if model is not None:
            batch = (s[None], np.array([a]), s2[None])
            r = float(collect_reward(transition_log_likelihood(model, None, *batch)[:, 0],
                                     transition_log_likelihood(model, mask, *batch)[:, 0]))
            n[bucket, a] += 1
            q[bucket, a] += (r - q[bucket, a]) / n[bucket, a]
            rewards.append(r)
        buf.add(s, a, env.reward(s), s2, ep, t)
        cover[np.arange(d), s, a] = True
        if len(buf) % 1000 == 0 or len(buf) == budget:
            coverage_trace.append(int(cover.sum()))
        s, t = s2, t + 1
    pairs = np.zeros((d, max(env.state_cardinalities)), dtype=bool)
    if budget:
        pairs[np.arange(d)[None, :], buf.next_states] = True
    valid = sum(env.state_cardinalities)
    stats = {
        "transitions": len(buf),
        "episodes": int(ep + 1) if budget else 0,
        "warmup": warmup,
        "mean_collect_reward": float(np.mean(rewards)) if rewards else 0.0,
        "value_coverage": float(pairs.sum() / valid),
        "triple_coverage_trace": coverage_trace,
    }
    return buf, stats


def _quick_model(env, buf, cfg, rng):
    model = DynamicsModel(env.state_cardinalities, env.n_actions, cfg.network.dynamics_hidden, rng=rng)
    train_dynamics(model, buf, cfg.collect.quick_model_steps, rng, _schedule(cfg), cfg.training.batch_size,
                   cfg.training.learning_rate * 10)
    quick = type(cfg.discovery)(**{**cfg.discovery.to_dict(), "n_eval_rounds": cfg.collect.quick_discovery_rounds})
    mask = discover(model, buf, quick, rng, "constraint")
    return model, mask


# -- phases -----------------------------------------------------------------------------------

def cmd_generate_env(cfg: ExperimentConfig, run_dir, seed):
    run_dir = Path(run_dir)
    env = _env(cfg)(seed)
    a = env.write_manifest(run_dir / "env_manifest.txt")
    b = run_dir / "ground_truth.csv"
    env.graph.to_csv(b)
    return [a, b]


def cmd_collect(cfg: ExperimentConfig, run_dir, seed):
    run_dir = Path(run_dir)
    env = _env(cfg)(seed)
    buf, stats = collect_transitions(env, cfg, stream(seed, "collect"))
    return [buf.save(run_dir / "collect_buffer.jsonl"), _write_json(run_dir / "collect_stats.json", stats)]


def _train_step1_model(cfg, env, buf, seed, steps):
    rng = stream(seed, "training")
    model = DynamicsModel(env.state_cardinalities, env.n_actions, cfg.network.dynamics_hidden, rng=rng)
    model, opt, losses = train_dynamics(model, buf, steps, rng, _schedule(cfg), cfg.training.batch_size,
                                        cfg.training.learning_rate, prediction_steps=cfg.training.prediction_steps,
                                        log_every=max(1, steps // 20) if steps else 0, logger=log)
    return model, opt, losses


def cmd_step1(cfg: ExperimentConfig, run_dir, seed):
    """Train the dynamics model, discover the mask, fit the reward model."""
    run_dir = Path(run_dir)
    _require(run_dir, "collect_buffer.jsonl", "ground_truth.csv")
    env = _env(cfg)(seed)
    buf = ReplayBuffer.load(run_dir / "collect_buffer.jsonl")
    steps = cfg.training.dynamics_steps
    if cfg.experiment.ablation == "simultaneous":
        steps = int(round(steps * cfg.task.simultaneous_initial_fraction))
    model, opt, losses = _train_step1_model(cfg, env, buf, seed, steps)
    mask = discover(model, buf, cfg.discovery, stream(seed, "discovery"), cfg.experiment.backend)
    rmodel = RewardModel(env.state_cardinalities, env.n_actions, cfg.network.reward_hidden,
                         rng=stream(seed, "training"))
    rmodel = train_reward(rmodel, buf, mask, cfg.training.reward_steps, stream(seed, "training"),
                          goal_dims=env.reward_dims(), **_reward_kwargs(cfg))
    truth = _truth(run_dir)
    probe = buf.sample(min(len(buf), 2000), stream(seed, "eval"))
    mse = float(np.mean((rmodel.predict(probe[0], probe[1]) - probe[2]) ** 2))
    metrics = {"graph": graph_metrics(mask, truth).to_dict(),
               "graph_with_self": graph_metrics(mask, truth, include_self=True).to_dict(),
               "dynamics_loss_trace": losses, "reward_train_mse": mse}
    files = [model.save(run_dir / "dynamics.npz", opt), rmodel.save(run_dir / "reward_step1.npz")]
    files += _save_mask(run_dir, "mask_step1", mask)
    files.append(_write_json(run_dir / "metrics_step1.json", metrics))
    return files


def cmd_step2(cfg: ExperimentConfig, run_dir, seed):
    """Empowerment-driven exploration alternating with mask refinement."""
    run_dir = Path(run_dir)
    _require(run_dir, "dynamics.npz", "mask_step1.csv", "reward_step1.npz")
    env = _env(cfg)(seed)
    truth = _truth(run_dir)
    model = DynamicsModel.load(run_dir / "dynamics.npz")
    mask0 = _load_mask(run_dir, "mask_step1")
    rmodel = RewardModel.load(run_dir / "reward_step1.npz")
    rng = stream(seed, "exploration")
    policy = ExplorationPolicy(env.state_cardinalities, env.n_actions, cfg.empowerment.policy_hidden,
                               cfg.empowerment.temperature, rng=rng)
    epochs = 0 if cfg.experiment.ablation == "no-step2" else cfg.empowerment.epochs
    base = ReplayBuffer.load(run_dir / "collect_buffer.jsonl")
    result = alternate_optimize(model, mask0, rmodel, policy, env, epochs, config=cfg.empowerment,
                                discovery=cfg.discovery, base_buffer=base, rng=rng, backend=cfg.experiment.backend,
                                truth=truth, goal_dims=env.reward_dims())
    files = _save_mask(run_dir, "mask", result.mask)
    files += [result.rmodel.save(run_dir / "reward.npz"), result.policy.save(run_dir / "policy.npz"),
              result.buffer.save(run_dir / "emp_buffer.jsonl"),
              write_trace_csv(run_dir / "empowerment_trace.csv", result.trace)]
    metrics = {"before": graph_metrics(mask0, truth).to_dict(), "after": graph_metrics(result.mask, truth).to_dict(),
               "epochs": epochs, "exploration_transitions": len(result.buffer)}
    files.append(_write_json(run_dir / "metrics_step2.json", metrics))
    return files


def cmd_step3(cfg: ExperimentConfig, run_dir, seed, out_dir=None):
    """Plan with CEM on the learned models; ``out_dir`` redirects the curves (for ablations)."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _require(run_dir, "dynamics.npz", "mask.csv", "reward.npz")
    env = _env(cfg)(seed)
    model = DynamicsModel.load(run_dir / "dynamics.npz")
    mask = _load_mask(run_dir, "mask")
    rmodel = RewardModel.load(run_dir / "reward.npz")
    base = ReplayBuffer.load(run_dir / "collect_buffer.jsonl")
    mode = "no_shaping" if cfg.experiment.ablation == "no-shaping" else "full"
    shaping = ShapedRewardConfig(cfg.planner.lam, mode)
    rng = stream(seed, "planning")
    upd_rng = stream(seed, "training")
    task_buf = ReplayBuffer(env.state_cardinalities, env.n_actions,
                            capacity=max(1, cfg.task.episodes * env.step_limit))
    state = {"model": model, "mask": mask, "rmodel": rmodel}
    simultaneous = cfg.experiment.ablation == "simultaneous"

    def on_episode(ep, buffer):
        k = ep + 1
        if k % 25 == 0:
            log.info("seed %d: task episode %d/%d", seed, k, cfg.task.episodes)
        data = None
        changed = False
        if simultaneous and k % cfg.task.simultaneous_every == 0:
            data = ReplayBuffer.union(base, buffer)
            train_dynamics(state["model"], data, cfg.task.simultaneous_steps, upd_rng, _schedule(cfg),
                           cfg.training.batch_size, cfg.training.learning_rate)
            state["mask"] = discover(state["model"], data, cfg.discovery, upd_rng, cfg.experiment.backend)
            changed = True
        if cfg.task.reward_update_every and k % cfg.task.reward_update_every == 0:
            data = data or ReplayBuffer.union(base, buffer)
            state["rmodel"] = train_reward(state["rmodel"], data, state["mask"], cfg.task.reward_update_steps,
                                           upd_rng, goal_dims=env.reward_dims(), **_reward_kwargs(cfg))
            changed = True
        if changed:
            return state["model"], state["mask"], state["rmodel"]
        return None

    records = run_task_policy(env, model, mask, rmodel, cfg.planner.cem(), cfg.task.episodes, rng, shaping,
                              buffer=task_buf, on_episode=on_episode)
    random_records = run_random_policy(env, cfg.task.episodes, stream(seed, "eval"))
    return [write_curves_csv(out_dir / "curves.csv", records), write_success_csv(out_dir / "success.csv", records),
            write_curves_csv(out_dir / "random_curves.csv", random_records)]


def cmd_eval(cfg: ExperimentConfig, run_dir, seed):
    """ID/OOD prediction accuracy for the causal and dense views, final graph metrics."""
    run_dir = Path(run_dir)
    _require(run_dir, "dynamics.npz", "mask.csv")
    env = _env(cfg)(seed)
    model = DynamicsModel.load(run_dir / "dynamics.npz")
    mask = _load_mask(run_dir, "mask")
    truth = _truth(run_dir)
    rng = stream(seed, "eval")
    n, H = cfg.eval.n_transitions, cfg.eval.horizon
    data = {"id": make_prediction_dataset(env, n, H, rng), "ood": make_prediction_dataset(env, n, H, rng, ood=True)}
    pred = {}
    rows = ["model,split,step,accuracy"]
    for name, m in (("causal", mask), ("dense", None)):
        for split, ds in data.items():
            acc = prediction_accuracy(model, m, ds, H).accuracy
            pred[f"{name}_{split}"] = acc
            rows += [f"{name},{split},{t + 1},{a:.10g}" for t, a in enumerate(acc)]
    pred_path = run_dir / "prediction.csv"
    pred_path.write_text("\n".join(rows) + "\n")
    metrics = {"graph": graph_metrics(mask, truth).to_dict(), "prediction": pred,
               "ood_gap": {k: pred[f"{k}_id"][0] - pred[f"{k}_ood"][0] for k in ("causal", "dense")}}
    for name in ("metrics_step1.json", "metrics_step2.json"):
        p = run_dir / name
        if p.exists():
            data_ = json.loads(p.read_text())
            key = "graph_step1" if name.endswith("1.json") else "graph_step2"
            metrics[key] = data_["graph"] if "graph" in data_ else data_["after"]
    curves = run_dir / "curves.csv"
    if curves.exists():
        c = read_csv_columns(curves)
        r = read_csv_columns(run_dir / "random_curves.csv")
        metrics["task"] = {"last50_task_reward": float(np.mean(c["task_reward"][-50:])),
                           "random_last50_task_reward": float(np.mean(r["task_reward"][-50:])),
                           "success_rate": float(np.mean(c["success"]))}
    return [pred_path, _write_json(run_dir / "metrics.json", metrics)]


PHASE_FUNCS = {"generate-env": cmd_generate_env, "collect": cmd_collect, "step1": cmd_step1,
               "step2": cmd_step2, "step3": cmd_step3, "eval": cmd_eval}


def run_phase(cfg: ExperimentConfig, run_dir, seed, phase, manifest=None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.ini")
    manifest = manifest or RunManifest.open(run_dir, cfg.hash(), seed)
    if "config.ini" not in manifest.data["outputs"]:
        manifest.data["outputs"]["config.ini"] = sha256_file(run_dir / "config.ini")
    log.info("seed %d: %s", seed, phase)
    t0 = time.perf_counter()
    files = PHASE_FUNCS[phase](cfg, run_dir, seed)
    manifest.record(phase, files, time.perf_counter() - t0)
    return files


def cmd_report(run_dirs, out_dir):
    return summarize_runs([Path(r) for r in run_dirs], out_dir)


def cmd_pipeline(cfg: ExperimentConfig, out_root, seeds=None, stop_after=None, phases=PHASES):
    """Run every phase for each seed, skipping phases already completed under the same config.

    ``stop_after`` ends each seed's run after the named phase (used to
    simulate interruption).  Returns the list of run directories.
    """
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    out_root = Path(out_root)
    run_dirs = []
    for seed in seeds:
        run_dir = run_dir_for(out_root, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest.open(run_dir, cfg.hash(), seed)
        if not manifest.data["phases"]:
            for stale in run_dir.iterdir():
                if stale.is_file() and stale.name != "run.log":
                    stale.unlink()
        for phase in phases:
            if manifest.completed(phase):
                log.info("seed %d: %s already complete, skipping", seed, phase)
            else:
                run_phase(cfg, run_dir, seed, phase, manifest)
            if phase == stop_after:
                break
        run_dirs.append(run_dir)
    if stop_after is None:
        cmd_report(run_dirs, out_root / "report")
    return run_dirs


def run_checksums(run_dir):
    """sha256 of every tracked file in a run directory (manifest and logs excluded)."""
    run_dir = Path(run_dir)
    return {str(p.relative_to(run_dir)): sha256_file(p) for p in sorted(run_dir.rglob("*"))
            if p.is_file() and p.name not in UNTRACKED and not p.name.endswith(".tmp")}
