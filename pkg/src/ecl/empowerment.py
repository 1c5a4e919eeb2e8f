"""Empowerment-driven exploration with a frozen dynamics model.

The exploration policy maximises the expected KL divergence between the
causal and the dense predictive distributions; every expectation over
actions is an exact enumeration of the discrete action set.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .discovery import DiscoveryConfig, online_mask_update
from .models import CausalMask, InputLayout, ReplayBuffer, _as_gates

log = logging.getLogger("ecl")


@dataclass
class EmpowermentConfig:
    epochs: int = 50
    episodes_per_epoch: int = 4
    horizon: int | None = None
    policy_hidden: tuple = (64,)
    policy_learning_rate: float = 1e-3
    updates_per_epoch: int = 10
    policy_batch_size: int = 64
    entropy_beta: float = 0.01
    clip_norm: float = 10.0
    temperature: float = 1.0
    trace_states: int = 16
    mc_samples: int = 64
    reward_steps: int = 1000

    def to_dict(self):
        d = asdict(self)
        d["policy_hidden"] = list(self.policy_hidden)
        return d


# -- policy ---------------------------------------------------------------------------

class ExplorationPolicy:
    """Softmax policy over the discrete action set, conditioned on one-hot state."""

    def __init__(self, state_cardinalities, n_actions, hidden=(64,), temperature=1.0, rng=None, params=None):
        self.layout = InputLayout(tuple(int(c) for c in state_cardinalities), int(n_actions))
        self.spec = nn.MlpSpec(self.layout.width - self.layout.n_actions, tuple(hidden), int(n_actions))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = params if params is not None else nn.ParameterSet.init(self.spec, rng)
        self.temperature = float(temperature)

    @property
    def n_actions(self):
        return self.layout.n_actions

    def features(self, states):
        return self.layout.encode(states)[:, : self.spec.input_width]

    def logits(self, states):
        return nn.forward(self.spec, self.params, self.features(states)) / self.temperature

    def probs(self, states):
        return nn.softmax(self.logits(np.atleast_2d(states)))

    def sample(self, state, rng):
        p = self.probs(state)[0]
        return int(rng.choice(self.n_actions, p=p))

    def save(self, path):
        extra = {"kind": "exploration_policy", "state_cardinalities": list(self.layout.state_cardinalities),
                 "n_actions": self.n_actions, "temperature": self.temperature}
        return nn.save_checkpoint(path, self.spec, self.params, extra=extra)

    @classmethod
    def load(cls, path):
        spec, params, _opt, extra = nn.load_checkpoint(path)
        return cls(extra["state_cardinalities"], extra["n_actions"], spec.hidden_widths, extra["temperature"], params=params)


class UniformPolicy:
    """Fixed uniform distribution; handy as a reference policy."""

    def __init__(self, n_actions):
        self.n_actions = int(n_actions)

    def probs(self, states):
        return np.full((len(np.atleast_2d(states)), self.n_actions), 1.0 / self.n_actions)


# -- KL gap ---------------------------------------------------------------------------------

def action_log_probs(model, mask, states):
    """Per-dim log-probabilities for every action: ``(B, A, d, kmax)``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    B, A = len(states), model.n_actions
    rep = np.repeat(states, A, axis=0)
    acts = np.tile(np.arange(A), B)
    logp = model.log_probs(rep, acts, _as_gates(model, mask))  # (d, B*A, K)
    return logp.transpose(1, 0, 2).reshape(B, A, model.n_dims, -1)


def categorical_kl(logp, logq):
    """``sum_k p (log p - log q)`` over the last axis, summed over dims (axis -2)."""
    p = np.exp(logp)
    return np.sum(p * (logp - logq), axis=(-1, -2))


def gap_table(model, mask, states):
    """``kl_gap`` for every (state, action) pair: ``(B, A)``."""
    return np.maximum(categorical_kl(action_log_probs(model, mask, states), action_log_probs(model, None, states)), 0.0)


def kl_gap(model, mask, s, a):
    """``sum_j KL(P_causal(. | s, a) || P_dense(. | s, a))`` in nats."""
    single = np.asarray(s).ndim == 1
    states = np.atleast_2d(s)
    actions = np.atleast_1d(a)
    lc = model.log_probs(states, actions, _as_gates(model, mask)).transpose(1, 0, 2)
    ld = model.log_probs(states, actions, None).transpose(1, 0, 2)
    out = np.maximum(categorical_kl(lc, ld), 0.0)
    return float(out[0]) if single else out


def exploration_objective(model, mask, policy, s, gaps=None):
    """``sum_a pi(a | s) kl_gap(s, a)``, averaged when ``s`` is a batch."""
    states = np.atleast_2d(s)
    gaps = gap_table(model, mask, states) if gaps is None else gaps
    return float(np.mean(np.sum(policy.probs(states) * gaps, axis=1)))


# -- empowerment ------------------------------------------------------------------------------

@dataclass
class EmpowermentEstimate:
    causal_term: float
    dense_term: float
    kl_term: float
    entropy_terms: tuple = field(default=(0.0, 0.0))


def _joint_logp(logp_table, next_states):
    """``log p(s' | a)`` for every action and every candidate ``s'``: ``(N, A)``."""
    d = logp_table.shape[1]
    return sum(logp_table[:, j, next_states[:, j]].T for j in range(d))


def _logmeanexp(weights_log, x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(weights_log + x - m), axis=axis))


def exact_mutual_information(logp_table, pi, cardinalities):
    """``I(a; s')`` for one state by full enumeration of the next-state space.

    ``logp_table`` is ``(A, d, kmax)``.  Returns ``(mi, marginal_entropy)``.
    """
    grids = np.meshgrid(*[np.arange(k) for k in cardinalities], indexing="ij")
    nxt = np.stack([g.ravel() for g in grids], axis=1)
    logj = _joint_logp(logp_table, nxt)  # (N, A)
    logpi = np.log(np.maximum(pi, 1e-300))
    logm = _logmeanexp(logpi[None, :], logj, axis=1)  # (N,)
    pj = np.exp(logj)
    mi = float(np.sum(pi[None, :] * pj * (logj - logm[:, None])))
    pm = np.exp(logm)
    h = float(-np.sum(pm * logm))
    return mi, h


def mc_mutual_information(logp_table, pi, rng, n_samples=64):
    """Monte-Carlo ``E[log p(s'|a) - log p(s')]`` with the exact mixture marginal."""
    A, d, _ = logp_table.shape
    acts = rng.choice(A, size=n_samples, p=pi)
    probs = np.exp(logp_table[acts])  # (n, d, K)
    cum = np.cumsum(probs, axis=-1)
    u = rng.random((n_samples, d, 1))
    nxt = np.minimum((u > cum).sum(axis=-1), logp_table.shape[-1] - 1)
    logj = _joint_logp(logp_table, nxt)  # (n, A)
    logpi = np.log(np.maximum(pi, 1e-300))
    logm = _logmeanexp(logpi[None, :], logj, axis=1)
    return float(np.mean(logj[np.arange(n_samples), acts] - logm)), float(-np.mean(logm))


def estimate_empowerment(model, mask, policy, states, rng=None, n_samples=64, exact_limit=200_000,
                         return_entropy=False):
    """Mean ``I(a; s' | s)`` under ``policy`` (``mask=None`` for the dense model).

    Small systems (``A * prod(cardinalities) <= exact_limit``) are enumerated
    exactly; otherwise a Monte-Carlo estimator with the exact action-mixture
    marginal is used.
    """
    states = np.atleast_2d(states)
    cards = model.layout.state_cardinalities
    exact = model.n_actions * float(np.prod(cards, dtype=np.float64)) <= exact_limit
    rng = rng if rng is not None else np.random.default_rng(0)
    table = action_log_probs(model, mask, states)
    pis = policy.probs(states)
    mis, hs = [], []
    for b in range(len(states)):
        if exact:
            mi, h = exact_mutual_information(table[b], pis[b], cards)
        else:
            mi, h = mc_mutual_information(table[b], pis[b], rng, n_samples)
        mis.append(mi)
        hs.append(h)
    mi, h = float(np.mean(mis)), float(np.mean(hs))
    return (mi, h) if return_entropy else mi


def empowerment_terms(model, mask, policy, states, rng=None, n_samples=64):
    causal, h_causal = estimate_empowerment(model, mask, policy, states, rng, n_samples, return_entropy=True)
    dense, h_dense = estimate_empowerment(model, None, policy, states, rng, n_samples, return_entropy=True)
    kl = exploration_objective(model, mask, policy, states)
    return EmpowermentEstimate(causal, dense, kl, (h_causal, h_dense))


# -- policy optimisation ----------------------------------------------------------------------

def policy_objective_grad(policy, states, gaps, beta):
    """Objective ``mean_b [sum_a pi g + beta H(pi)]`` and its gradient w.r.t. the raw network output."""
    z = policy.logits(states)
    logpi = nn.log_softmax(z)
    pi = np.exp(logpi)
    H = -np.sum(pi * logpi, axis=1, keepdims=True)
    gbar = np.sum(pi * gaps, axis=1, keepdims=True)
    B = len(states)
    dz = (pi * (gaps - gbar) - beta * pi * (logpi + H)) / B
    value = float(np.mean(gbar[:, 0] + beta * H[:, 0]))
    return value, dz / policy.temperature


def update_exploration_policy(policy, model, mask, state_batch, opt=None, beta=0.01, clip_norm=10.0,
                              learning_rate=1e-3, gaps=None):
    """One gradient-ascent step on the mean exploration objective plus entropy bonus.

    Returns ``(policy, opt, objective_before_step)``.
    """
    states = np.atleast_2d(state_batch)
    gaps = gap_table(model, mask, states) if gaps is None else gaps
    value, dz = policy_objective_grad(policy, states, gaps, beta)
    x = policy.features(states)
    grads, _ = nn.backward(policy.spec, policy.params, x, -dz)
    grads, _ = nn.clip_by_norm(grads, clip_norm)
    opt = opt or nn.OptimizerState.for_params(policy.params, learning_rate)
    nn.optimizer_step(opt, policy.params, grads)
    for p in policy.params.arrays():
        if not np.all(np.isfinite(p)):
            raise nn.NumericError("exploration policy parameters became non-finite")
    return policy, opt, value


# -- rollouts and the alternating loop ---------------------------------------------------------

def rollout_policy(env, act, buffer, episodes, horizon, rng, episode_offset=0):
    """Run ``episodes`` episodes choosing actions with ``act(state, rng)``.

    Episodes stop early when a step would enter the held-out region; that
    transition is not recorded.  Returns the number of transitions added.
    """
    added = 0
    for e in range(episodes):
        s = env.sample_initial_state(rng)
        for t in range(horizon):
            a = act(s, rng)
            s2 = env.step(s, a)
            if env.is_ood(s2):
                break
            buffer.add(s, a, env.reward(s), s2, episode_offset + e, t)
            added += 1
            s = s2
    return added


@dataclass
class Step2Result:
    mask: CausalMask
    rmodel: object
    policy: ExplorationPolicy
    buffer: ReplayBuffer
    trace: list


TRACE_FIELDS = ("epoch", "kl_term", "causal_term", "dense_term", "entropy_causal", "entropy_dense", "mask_f1",
                "n_edges", "buffer_size")


def alternate_optimize(model, mask, rmodel, policy, env, epochs, *, config: EmpowermentConfig = None,
                       discovery: DiscoveryConfig = None, base_buffer=None, rng=None, backend="constraint",
                       truth=None, goal_dims=None):
    """Alternate exploration-policy updates with online mask refinement.

    Each epoch updates the policy on states from the exploration buffer,
    rolls the policy out to add transitions, and every
    ``discovery.evaluation_frequency`` epochs re-runs discovery on the
    collected plus exploration data.  The dynamics model is never modified.
    """
    from .metrics import graph_metrics

    config = config or EmpowermentConfig()
    discovery = discovery or DiscoveryConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    horizon = config.horizon or env.step_limit
    buffer = ReplayBuffer(env.state_cardinalities, env.n_actions,
                          capacity=max(1, (epochs + 1) * config.episodes_per_epoch * horizon))
    trace = []
    if epochs <= 0:
        return Step2Result(mask, rmodel, policy, buffer, trace)
    checksum = model.checksum()
    opt = None
    episode = 0

    def act(s, r):
        return policy.sample(s, r)

    episode += config.episodes_per_epoch
    rollout_policy(env, act, buffer, config.episodes_per_epoch, horizon, rng, 0)
    for epoch in range(1, epochs + 1):
        try:
            for _ in range(config.updates_per_epoch):
                if len(buffer) == 0:
                    break
                n = min(config.policy_batch_size, len(buffer))
                states = buffer.sample(n, rng)[0]
                policy, opt, _ = update_exploration_policy(policy, model, mask, states, opt, config.entropy_beta,
                                                           config.clip_norm, config.policy_learning_rate)
            rollout_policy(env, act, buffer, config.episodes_per_epoch, horizon, rng, episode)
        except nn.NumericError:
            raise
        except Exception as exc:  # environment failures carry the epoch index
            raise RuntimeError(f"exploration failed at epoch {epoch}: {exc}") from exc
        episode += config.episodes_per_epoch
        if epoch % discovery.evaluation_frequency == 0:
            mask, rmodel, _ = online_mask_update(model, mask, rmodel, base_buffer, buffer, discovery, rng, backend,
                                                 goal_dims, config.reward_steps)
            log.info("exploration epoch %d/%d: %d buffered, %d edges", epoch, epochs, len(buffer),
                     int(mask.adjacency().sum()))
        probe = buffer.sample(min(config.trace_states, len(buffer)), rng)[0] if len(buffer) else None
        row = {"epoch": epoch, "n_edges": int(mask.adjacency().sum()), "buffer_size": len(buffer)}
        if probe is not None:
            est = empowerment_terms(model, mask, policy, probe, rng, config.mc_samples)
            row.update(kl_term=est.kl_term, causal_term=est.causal_term, dense_term=est.dense_term,
                       entropy_causal=est.entropy_terms[0], entropy_dense=est.entropy_terms[1])
        if truth is not None:
            row["mask_f1"] = graph_metrics(mask, truth).f1
        trace.append(row)
    if model.checksum() != checksum:
        raise RuntimeError("dynamics parameters changed during exploration")
    return Step2Result(mask, rmodel, policy, buffer, trace)


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, restval="")
        w.writeheader()
        for row in trace:
            w.writerow({k: row.get(k, "") for k in TRACE_FIELDS})
    return Path(path)
