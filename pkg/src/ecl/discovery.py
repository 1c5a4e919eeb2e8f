"""Causal mask discovery: CMI thresholding and L1-regularised soft masks.

Both backends read a dynamics model that was trained with random input
dropout, so any leave-one-out or soft gate query is in-distribution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .models import CausalMask, ReplayBuffer, UsageError, state_abstraction, train_reward, unpack_batch

SELF_LOGIT = 10.0


@dataclass
class DiscoveryConfig:
    cmi_threshold: float = 0.02
    optimization_frequency: int = 10
    evaluation_frequency: int = 10
    eval_batch_size: int = 32
    eval_step: int = 1
    n_eval_rounds: int = 100
    cmi_aggregation: str = "mean"
    ema_decay: float = 0.9
    prediction_reward_weight: float = 1.0
    score_coefficient: float = 0.002
    score_start_step: int = 500
    score_steps: int = 2000
    score_learning_rate: float = 0.05
    score_batch_size: int = 64
    score_init_logit: float = 2.0
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if not self.cmi_threshold > 0:
            raise ValueError("cmi_threshold must be positive")
        if self.score_coefficient < 0:
            raise ValueError("score_coefficient must be non-negative")
        if self.cmi_aggregation not in ("mean", "ema"):
            raise ValueError("cmi_aggregation must be 'mean' or 'ema'")

    @classmethod
    def for_env(cls, kind, **overrides):
        base = {"chemical": dict(cmi_threshold=0.02, score_coefficient=0.002),
                "physical": dict(cmi_threshold=0.01, score_coefficient=0.02)}[kind]
        return cls(**{**base, **overrides})

    def to_dict(self):
        return asdict(self)

    @property
    def samples_per_round(self):
        return self.eval_batch_size * self.eval_step


# -- constraint backend -------------------------------------------------------------

def leave_one_out_scores(model, states, actions, next_states, sources=None):
    """Per-sample ``log p(full) - log p(without source i)``, shape ``(len(sources), d, B)``."""
    d, G = model.n_dims, model.layout.n_groups
    sources = range(G) if sources is None else list(sources)
    B = len(states)
    nxt = np.asarray(next_states, dtype=np.int64).T[..., None]

    def loglik(gates):
        logp = nn.log_softmax(model.index_logits(states, actions, gates))
        return np.take_along_axis(logp, nxt, axis=-1)[..., 0]

    full = loglik(np.ones((d, G)))
    out = np.empty((len(sources), d, B))
    for k, i in enumerate(sources):
        g = np.ones((d, G))
        g[:, i] = 0.0
        out[k] = full - loglik(g)
    return out


class CmiTracker:
    """Running CMI aggregate over evaluation rounds (plain mean or EMA)."""

    def __init__(self, shape, aggregation="mean", decay=0.9):
        self.aggregation = aggregation
        self.decay = decay
        self.value = np.zeros(shape)
        self.rounds = 0

    def update(self, round_scores):
        round_scores = np.asarray(round_scores, dtype=np.float64)
        self.rounds += 1
        if self.aggregation == "ema":
            self.value = round_scores.copy() if self.rounds == 1 else self.decay * self.value + (1 - self.decay) * round_scores
        else:
            self.value += (round_scores - self.value) / self.rounds
        return self.value


def cmi_matrix(model, buffer, config: DiscoveryConfig, rng, sources=None):
    """CMI estimates ``(n_sources, d)``; rows follow ``sources`` (default: all groups)."""
    n = config.samples_per_round
    if len(buffer) < n:
        raise UsageError(f"buffer holds {len(buffer)} transitions, CMI rounds need {n}")
    G = model.layout.n_groups
    rows = G if sources is None else len(list(sources))
    tracker = CmiTracker((rows, model.n_dims), config.cmi_aggregation, config.ema_decay)
    for _ in range(config.n_eval_rounds):
        s, a, _r, s2 = buffer.sample(n, rng)[:4]
        tracker.update(leave_one_out_scores(model, s, a, s2, sources).mean(axis=-1))
    return tracker.value


def estimate_cmi(model, buffer, edge, config: DiscoveryConfig, rng):
    """CMI of one edge ``(i, j)`` in nats; ``i == d`` denotes the action."""
    i, j = edge
    return float(cmi_matrix(model, buffer, config, rng, sources=[i])[0, j])


def mask_from_scores(scores, threshold):
    scores = np.asarray(scores, dtype=np.float64)
    adj = (scores >= threshold).astype(np.int64)
    return CausalMask.from_adjacency(adj, scores)


def discover_constraint(model, buffer, config: DiscoveryConfig, rng):
    """Keep edge ``i -> j`` iff its CMI reaches the threshold; self edges always kept."""
    return mask_from_scores(cmi_matrix(model, buffer, config, rng), config.cmi_threshold)


# -- score backend ----------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def initial_logits(d, init=2.0):
    logits = np.full((d + 1, d), float(init))
    logits[np.arange(d), np.arange(d)] = SELF_LOGIT
    return logits


def mask_objective(model, logits, batch, coefficient, rng):
    """Stochastic-gate objective and its logit gradient.

    Gates are hard Bernoulli draws ``g ~ Bernoulli(sigmoid(logits))`` per
    target and sample, so every query stays inside the dropout-trained
    regime.  The gradient of ``E[loglik]`` w.r.t. each gate probability is
    computed exactly as ``E[loglik | g_i = 1] - E[loglik | g_i = 0]`` by
    flipping one gate at a time.  Returns ``(loss, grad)`` where the loss is
    ``-loglik(sampled gates) / d + coefficient * sum(sigmoid(logits))``: the
    likelihood is averaged over target dimensions.  Self edges are fixed on
    and carry no penalty.
    """
    d, G = model.n_dims, model.layout.n_groups
    s, a, s2 = unpack_batch(batch)
    B = len(s)
    nxt = np.asarray(s2, dtype=np.int64).T[..., None]
    prob = sigmoid(logits)  # (G, d)
    free = np.ones((G, d), dtype=bool)
    free[np.arange(d), np.arange(d)] = False
    gates = (rng.random((d, B, G)) < prob.T[:, None, :]).astype(np.float64)
    gates[np.arange(d), :, np.arange(d)] = 1.0

    def loglik(g):
        logp = nn.log_softmax(model.index_logits(s, a, g))
        return np.take_along_axis(logp, nxt, axis=-1)[..., 0]  # (d, B)

    base = loglik(gates)
    diff = np.zeros((G, d))
    for i in range(G):
        flipped = gates.copy()
        flipped[:, :, i] = 1.0 - flipped[:, :, i]
        on = gates[:, :, i] == 1.0
        delta = base - loglik(flipped)  # ll(sample) - ll(flip)
        diff[i] = np.where(on, delta, -delta).mean(axis=1) / d  # ll(g_i=1) - ll(g_i=0)
    loss = -float(base.mean()) + coefficient * float(prob[free].sum())
    grad = (coefficient - diff) * prob * (1.0 - prob)
    grad[~free] = 0.0
    return loss, grad


def score_based_step(model, mask_logits, batch, config: DiscoveryConfig, global_step=None, opt=None, rng=None):
    """One Adam step on the mask logits; the network stays fixed.

    The L1 term is active only once ``global_step >= score_start_step``
    (``global_step=None`` means always active).  Returns ``(logits, loss)``.
    """
    active = global_step is None or global_step >= config.score_start_step
    coef = config.score_coefficient if active else 0.0
    rng = rng if rng is not None else np.random.default_rng(0 if global_step is None else global_step)
    loss, grad = mask_objective(model, mask_logits, batch, coef, rng)
    if not np.isfinite(loss):
        raise nn.NumericError(f"mask loss diverged at step {global_step}", step=global_step)
    opt = opt or nn.Adam([mask_logits], config.score_learning_rate)
    opt.step([mask_logits], [grad])
    return mask_logits, loss


def binarize(mask_logits, threshold=0.5):
    logits = np.asarray(mask_logits, dtype=np.float64)
    adj = (sigmoid(logits) >= threshold).astype(np.int64)
    scores = np.clip(logits, -1e6, 1e6)
    return CausalMask.from_adjacency(adj, scores)


def discover_score(model, buffer, config: DiscoveryConfig, rng, logits=None, steps=None, start_step=0):
    """Fit mask logits by L1-regularised expected likelihood and binarise them."""
    logits = initial_logits(model.n_dims, config.score_init_logit) if logits is None else np.array(logits, dtype=np.float64)
    steps = config.score_steps if steps is None else steps
    bs = min(config.score_batch_size, len(buffer))
    if bs == 0:
        raise UsageError("score-based discovery needs data")
    opt = nn.Adam([logits], config.score_learning_rate)
    for k in range(steps):
        batch = buffer.sample(bs, rng)
        score_based_step(model, logits, batch, config, start_step + k, opt, rng)
    return binarize(logits, config.binarize_threshold)


def discover(model, buffer, config: DiscoveryConfig, rng, backend="constraint", previous=None):
    if backend == "constraint":
        return discover_constraint(model, buffer, config, rng)
    if backend == "score":
        logits = None if previous is None else previous.scores
        start = 0 if previous is None else config.score_start_step
        return discover_score(model, buffer, config, rng, logits=logits, start_step=start)
    raise ValueError(f"unknown discovery backend {backend!r}")


# -- online refinement -----------------------------------------------------------------

def online_mask_update(model, mask, rmodel, base_buffer, fresh_buffer, config: DiscoveryConfig, rng,
                       backend="constraint", goal_dims=None, reward_steps=1000, reward_kwargs=None):
    """Re-run discovery on old plus fresh transitions with the dynamics frozen.

    Returns ``(mask, rmodel, changed)``.  The reward model is retrained when
    the state abstraction implied by the new mask differs from the old one.
    """
    if fresh_buffer is None or len(fresh_buffer) == 0:
        return mask, rmodel, False
    before = model.checksum()
    data = ReplayBuffer.union(base_buffer, fresh_buffer) if base_buffer is not None and len(base_buffer) else fresh_buffer
    new_mask = discover(model, data, config, rng, backend, previous=mask)
    if model.checksum() != before:
        raise RuntimeError("dynamics parameters changed during mask update")
    goal_dims = range(mask.n_dims) if goal_dims is None else goal_dims
    old_keep = state_abstraction(mask, goal_dims)
    new_keep = state_abstraction(new_mask, goal_dims)
    if rmodel is not None and not np.array_equal(old_keep, new_keep):
        rmodel = train_reward(rmodel, data, new_mask, steps=reward_steps, rng=rng, goal_dims=goal_dims,
                              **(reward_kwargs or {}))
    return new_mask, rmodel, not mask.same_edges(new_mask)
