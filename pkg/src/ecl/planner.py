"""Curiosity-shaped reward and cross-entropy-method planning over learned models."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .models import _as_gates

SHAPING_MODES = ("full", "no_shaping", "causal_ablation")


@dataclass
class CemConfig:
    num_candidates: int = 64
    num_iterations: int = 5
    num_elites: int = 32
    action_noise: float = 0.03
    horizon: int = 10
    discount: float = 1.0
    max_rollout_size: int = 10_000_000

    def __post_init__(self):
        if self.num_elites > self.num_candidates:
            raise ValueError("num_elites must not exceed num_candidates")
        if self.horizon < 1 or self.num_iterations < 1 or self.num_elites < 1:
            raise ValueError("horizon, num_iterations and num_elites must be at least 1")
        if not 0.0 <= self.action_noise <= 1.0:
            raise ValueError("action_noise must lie in [0, 1]")

    @classmethod
    def for_env(cls, kind, **overrides):
        base = {"chemical": dict(num_candidates=64, num_iterations=5),
                "physical": dict(num_candidates=128, num_iterations=10)}[kind]
        return cls(**{**base, **overrides})

    def to_dict(self):
        return asdict(self)


@dataclass
class ShapedRewardConfig:
    lam: float = 1.0
    mode: str = "full"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.mode not in SHAPING_MODES:
            raise ValueError(f"mode must be one of {SHAPING_MODES}")

    @property
    def effective_lambda(self):
        return 0.0 if self.mode == "no_shaping" else self.lam

    def to_dict(self):
        return asdict(self)


# -- rewards ---------------------------------------------------------------------------

def _loglik(model, gates, states, actions, next_states):
    logp = model.log_probs(states, actions, gates)
    nxt = np.asarray(next_states, dtype=np.int64).T[..., None]
    return np.take_along_axis(logp, nxt, axis=-1)[..., 0].sum(axis=0)


def curiosity_reward(model, mask, s, a, s_next, reference=None):
    """``log P_dense(s') - log P_causal(s')`` on a realised transition.

    ``reference`` replaces the dense all-ones gate (used to check that the
    quantity is antisymmetric in the two models).
    """
    single = np.asarray(s).ndim == 1
    states, actions, nxt = np.atleast_2d(s), np.atleast_1d(a), np.atleast_2d(s_next)
    dense = _loglik(model, _as_gates(model, reference), states, actions, nxt)
    causal = _loglik(model, _as_gates(model, mask), states, actions, nxt)
    out = dense - causal
    return float(out[0]) if single else out


def imagined_curiosity(dense_logp, causal_logp):
    """``KL(P_dense || P_causal)`` summed over dims; inputs are ``(d, B, K)``."""
    p = np.exp(dense_logp)
    return np.maximum(np.sum(p * (dense_logp - causal_logp), axis=(0, 2)), 0.0)


def shaped_reward(task_r, cur_r, config: ShapedRewardConfig):
    return task_r + config.effective_lambda * cur_r


# -- simulators used inside planning ------------------------------------------------------

class LearnedSimulator:
    """Argmax rollouts through the causal model, task reward from the reward model."""

    def __init__(self, model, mask, rmodel, shaping: ShapedRewardConfig):
        self.model, self.rmodel, self.shaping = model, rmodel, shaping
        self.gates = _as_gates(model, mask)
        self.n_actions = model.n_actions
        self._causal = model.predictor(self.gates, np.float32)
        self._dense = model.predictor(None, np.float32) if shaping.effective_lambda > 0 else None

    def step(self, states, actions):
        """Return ``(next_states, shaped_reward, task_reward, curiosity)`` for a batch."""
        causal = nn.log_softmax(self._causal(states, actions))
        nxt = np.argmax(causal, axis=-1).T
        lam = self.shaping.effective_lambda
        if lam > 0:
            dense = nn.log_softmax(self._dense(states, actions))
            cur = imagined_curiosity(dense, causal)
        else:
            cur = np.zeros(len(states))
        task = self.rmodel.predict(nxt, actions)
        return nxt, task + lam * cur, task, cur


class OracleSimulator:
    """True environment dynamics and reward (for reference planning)."""

    def __init__(self, env):
        self.env = env
        self.n_actions = env.n_actions

    def step(self, states, actions):
        nxt = self.env.step_batch(states, actions)
        task = np.array([self.env.reward(s) for s in nxt], dtype=np.float64)
        zero = np.zeros(len(states))
        return nxt, task, task, zero


# -- CEM ----------------------------------------------------------------------------------

def _entropy(probs):
    p = np.clip(probs, 1e-300, 1.0)
    return float(-np.sum(probs * np.log(p), axis=-1).mean())


def score_sequences(sim, s0, seqs, discount=1.0):
    C, H = seqs.shape
    states = np.repeat(np.asarray(s0, dtype=np.int64)[None], C, axis=0)
    total = np.zeros(C)
    for t in range(H):
        states, r, _task, _cur = sim.step(states, seqs[:, t])
        total += discount ** t * r
    return total


def cem_search(sim, s0, config: CemConfig, rng, return_info=False):
    """Categorical CEM over action sequences; returns the best-scoring sequence seen."""
    A, H, C = sim.n_actions, config.horizon, config.num_candidates
    if H * C > config.max_rollout_size:
        raise ValueError(f"horizon x candidates = {H * C} exceeds the rollout guard {config.max_rollout_size}")
    probs = np.full((H, A), 1.0 / A)
    best_seq, best_score = None, -np.inf
    entropies = []
    for _ in range(config.num_iterations):
        sample_p = (1.0 - config.action_noise) * probs + config.action_noise / A
        cum = np.cumsum(sample_p, axis=1)
        u = rng.random((C, H, 1))
        seqs = np.minimum((u > cum[None]).sum(axis=-1), A - 1)
        scores = score_sequences(sim, s0, seqs, config.discount)
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_score:
            best_score, best_seq = float(scores[order[0]]), seqs[order[0]].copy()
        elites = seqs[order[: config.num_elites]]
        probs = np.zeros((H, A))
        for t in range(H):
            probs[t] = np.bincount(elites[:, t], minlength=A) / len(elites)
        entropies.append(_entropy(probs))
    if return_info:
        return best_seq, {"best_score": best_score, "elite_entropy": entropies}
    return best_seq


def cem_plan(model, mask, rmodel, config: CemConfig, s0, rng, shaping: ShapedRewardConfig = None, return_info=False):
    sim = LearnedSimulator(model, mask, rmodel, shaping or ShapedRewardConfig())
    return cem_search(sim, s0, config, rng, return_info)


# -- episodes -------------------------------------------------------------------------------

CURVE_FIELDS = ("episode", "task_reward", "final_reward", "shaped_reward_mean", "curiosity_mean", "success")


def run_task_policy(env, model, mask, rmodel, config: CemConfig, episodes, rng, shaping: ShapedRewardConfig = None,
                    simulator=None, buffer=None, on_episode=None, episode_offset=0):
    """Receding-horizon control: replan each step, execute the first action.

    Records per episode the mean true task reward per step, the final-step
    reward, the mean realised shaped reward and curiosity, and success.
    ``on_episode(index, buffer)`` lets the caller refit models between
    episodes; it may return a replacement ``(model, mask, rmodel)``.
    """
    shaping = shaping or ShapedRewardConfig()
    records = []
    for ep in range(episodes):
        sim = simulator or LearnedSimulator(model, mask, rmodel, shaping)
        s = env.sample_initial_state(rng)
        rewards, shaped, curs = [], [], []
        for t in range(env.step_limit):
            a = int(cem_search(sim, s, config, rng)[0])
            s2 = env.step(s, a)
            r = env.reward(s2)
            cur = curiosity_reward(model, mask, s, a, s2) if model is not None else 0.0
            rewards.append(r)
            curs.append(cur)
            shaped.append(shaped_reward(r, cur, shaping))
            if buffer is not None:
                buffer.add(s, a, env.reward(s), s2, episode_offset + ep, t)
            s = s2
        records.append({
            "episode": episode_offset + ep + 1,
            "task_reward": float(np.mean(rewards)),
            "final_reward": float(rewards[-1]),
            "shaped_reward_mean": float(np.mean(shaped)),
            "curiosity_mean": float(np.mean(curs)),
            "success": int(env.success(s)),
        })
        if on_episode is not None:
            update = on_episode(ep, buffer)
            if update is not None:
                model, mask, rmodel = update
    return records


def run_random_policy(env, episodes, rng, episode_offset=0):
    """Uniform random actions; the chance-level reference."""
    records = []
    for ep in range(episodes):
        s = env.sample_initial_state(rng)
        rewards = []
        for _ in range(env.step_limit):
            s = env.step(s, int(rng.integers(env.n_actions)))
            rewards.append(env.reward(s))
        records.append({"episode": episode_offset + ep + 1, "task_reward": float(np.mean(rewards)),
                        "final_reward": float(rewards[-1]), "shaped_reward_mean": float(np.mean(rewards)),
                        "curiosity_mean": 0.0, "success": int(env.success(s))})
    return records


def write_curves_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in CURVE_FIELDS})
    return Path(path)


def write_success_csv(path, records, window=10):
    """Success rate over consecutive windows of episodes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "success_rate"])
        for i in range(0, len(records), window):
            chunk = records[i:i + window]
            w.writerow([chunk[-1]["episode"], f"{np.mean([r['success'] for r in chunk]):.10g}"])
    return Path(path)
