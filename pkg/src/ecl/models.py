"""Maskable dynamics model, reward model, replay buffer and their training.

The dynamics model keeps one MLP per next-state dimension (stored stacked).
Each network sees the concatenated one-hot encoding of every state dimension
and of the action; input groups are multiplied by a gate in [0, 1].  The
all-ones gate is the dense model; a binary causal mask is the causal model.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .envs.base import read_matrix_csv, reachable_from, write_matrix_csv

INVALID_LOGIT = -1e9


class UsageError(ValueError):
    pass


# -- causal mask ----------------------------------------------------------------

@dataclass
class CausalMask:
    """Binary adjacency with the continuous scores behind it.

    ``state_to_state[i, j]`` gates source dim ``i`` into target ``j``;
    ``action_to_state[0, j]`` gates the action into target ``j``.  ``scores``
    has shape ``(d + 1, d)`` (state rows, then the action row).
    """

    state_to_state: np.ndarray
    action_to_state: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        s2s = np.asarray(self.state_to_state, dtype=np.int64).copy()
        d = s2s.shape[0]
        np.fill_diagonal(s2s, 1)
        self.state_to_state = s2s
        self.action_to_state = np.asarray(self.action_to_state, dtype=np.int64).reshape(1, d).copy()
        if not np.all(np.isin(s2s, (0, 1))) or not np.all(np.isin(self.action_to_state, (0, 1))):
            raise ValueError("mask entries must be 0 or 1")
        if self.scores is None:
            self.scores = self.adjacency().astype(np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (d + 1, d) or not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be a finite (d + 1, d) matrix")

    @classmethod
    def full(cls, d):
        return cls(np.ones((d, d)), np.ones((1, d)))

    @classmethod
    def from_adjacency(cls, adj, scores=None):
        adj = np.asarray(adj)
        return cls(adj[:-1], adj[-1:], scores)

    @property
    def n_dims(self):
        return self.state_to_state.shape[0]

    def adjacency(self):
        return np.vstack([self.state_to_state, self.action_to_state])

    def gates(self):
        """``(d, d + 1)`` gate matrix, row ``j`` = which groups feed target ``j``."""
        return self.adjacency().T.astype(np.float64)

    def copy(self):
        return CausalMask(self.state_to_state, self.action_to_state, self.scores.copy())

    def same_edges(self, other):
        return np.array_equal(self.adjacency(), other.adjacency())

    def to_csv(self, path, scores_path=None):
        write_matrix_csv(path, self.adjacency(), fmt="%d")
        if scores_path is not None:
            write_matrix_csv(scores_path, self.scores)

    @classmethod
    def from_csv(cls, path, scores_path=None):
        adj = read_matrix_csv(path, dtype=int)
        scores = read_matrix_csv(scores_path) if scores_path else None
        return cls.from_adjacency(adj, scores)


def state_abstraction(mask: CausalMask, goal_dims):
    """Keep goal dims and every ancestor of a goal dim under the mask."""
    d = mask.n_dims
    keep = np.zeros(d, dtype=np.int64)
    goal_dims = list(goal_dims)
    keep[goal_dims] = 1
    # ancestors: reachability on the reversed graph
    anc = reachable_from(mask.state_to_state.T, goal_dims)
    keep[anc] = 1
    return keep


# -- one-hot encoding -------------------------------------------------------------

@dataclass(frozen=True)
class InputLayout:
    state_cardinalities: tuple
    n_actions: int

    @property
    def n_dims(self):
        return len(self.state_cardinalities)

    @property
    def n_groups(self):
        return self.n_dims + 1

    @property
    def group_sizes(self):
        return (*self.state_cardinalities, self.n_actions)

    @functools.cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.group_sizes)[:-1]]).astype(np.int64)

    @property
    def width(self):
        return int(sum(self.group_sizes))

    @functools.cached_property
    def feature_group(self):
        return np.repeat(np.arange(self.n_groups), self.group_sizes)

    def encode(self, states, actions=None):
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        B = states.shape[0]
        x = np.zeros((B, self.width))
        offs = self.offsets
        rows = np.arange(B)[:, None]
        x[rows, offs[: self.n_dims] + states] = 1.0
        if actions is not None:
            x[np.arange(B), offs[-1] + np.asarray(actions, dtype=np.int64).reshape(B)] = 1.0
        return x


# -- dynamics model ----------------------------------------------------------------

def _hidden_to_logits(h, weights, biases, logit_mask):
    """Finish a forward pass from first-layer pre-activations (bias not yet added)."""
    h = h + biases[0]
    for w, b in zip(weights, biases[1:]):
        h = np.matmul(np.maximum(h, 0.0), w) + b
    return h + logit_mask


class DynamicsModel:
    def __init__(self, state_cardinalities, n_actions, hidden=(64, 32), rng=None, params=None):
        self.layout = InputLayout(tuple(int(c) for c in state_cardinalities), int(n_actions))
        self.kmax = max(self.layout.state_cardinalities)
        self.spec = nn.MlpSpec(self.layout.width, tuple(hidden), self.kmax)
        d = self.layout.n_dims
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = nn.ParameterSet.init(self.spec, rng, stack=d)
        params.check(self.spec)
        self.params = params
        self.logit_mask = np.zeros((d, 1, self.kmax))
        for j, k in enumerate(self.layout.state_cardinalities):
            self.logit_mask[j, 0, k:] = INVALID_LOGIT

    @property
    def n_dims(self):
        return self.layout.n_dims

    @property
    def n_actions(self):
        return self.layout.n_actions

    def gate_features(self, gates):
        """Expand group gates ``(d, G)`` or ``(d, B, G)`` to feature gates."""
        return np.asarray(gates, dtype=np.float64)[..., self.layout.feature_group]

    def gated_input(self, x, gates):
        gf = self.gate_features(gates)
        if gf.ndim == 2:
            gf = gf[:, None, :]
        return x[None, :, :] * gf

    def logits(self, x, gates=None):
        """Logits ``(d, B, kmax)`` for encoded inputs ``x`` under ``gates``."""
        xin = np.broadcast_to(x, (self.n_dims, *x.shape)) if gates is None else self.gated_input(x, gates)
        return nn.forward(self.spec, self.params, xin) + self.logit_mask

    def input_indices(self, states, actions):
        """Active one-hot feature index per input group, ``(B, G)``."""
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        offs = self.layout.offsets
        acts = np.asarray(actions, dtype=np.int64).reshape(len(states), 1)
        return np.concatenate([offs[: self.n_dims] + states, offs[-1] + acts], axis=1)

    def index_logits(self, states, actions, gates=None):
        """Same as ``logits`` on one-hot inputs, computed by gathering first-layer rows.

        Accepts gates ``(d, G)`` (folded into the first-layer weights) or
        per-sample gates ``(d, B, G)`` (applied to the gathered rows).
        """
        gates = None if gates is None else np.asarray(gates, dtype=np.float64)
        if gates is None or gates.ndim == 2:
            return self.predictor(gates)(states, actions)
        idx = self.input_indices(states, actions)
        h = (self.params.weights[0][:, idx, :] * gates[..., None]).sum(axis=2)
        return self._hidden_to_logits(h)

    def predictor(self, gates=None, dtype=np.float64):
        """Logit function with fixed gates ``(d, G)`` folded in once.

        The returned callable snapshots the current parameters; build a new
        one after training.  ``dtype=np.float32`` trades exactness for speed
        inside planning loops.
        """
        w1 = self.params.weights[0]
        if gates is not None:
            w1 = w1 * self.gate_features(gates)[:, :, None]
        # one row per input feature holding every target's hidden units
        rows = np.ascontiguousarray(w1.transpose(1, 0, 2), dtype=dtype).reshape(w1.shape[1], -1)
        weights = [w.astype(dtype) for w in self.params.weights[1:]]
        biases = [b.astype(dtype) for b in self.params.biases]
        logit_mask = self.logit_mask.astype(dtype)
        d = self.n_dims

        def fn(states, actions):
            idx = self.input_indices(states, actions)
            h = rows[idx[:, 0]]
            for g in range(1, idx.shape[1]):
                h += rows[idx[:, g]]
            return _hidden_to_logits(h.reshape(len(idx), d, -1).transpose(1, 0, 2), weights, biases, logit_mask)

        return fn

    def _hidden_to_logits(self, h):
        return _hidden_to_logits(h, self.params.weights[1:], self.params.biases, self.logit_mask)

    def log_probs(self, states, actions, gates=None):
        return nn.log_softmax(self.index_logits(states, actions, gates))

    def checksum(self):
        import hashlib

        return hashlib.sha256(self.params.flat().tobytes()).hexdigest()

    def save(self, path, opt=None):
        extra = {
            "kind": "dynamics",
            "state_cardinalities": list(self.layout.state_cardinalities),
            "n_actions": self.layout.n_actions,
        }
        return nn.save_checkpoint(path, self.spec, self.params, opt, extra)

    @classmethod
    def load(cls, path):
        spec, params, _opt, extra = nn.load_checkpoint(path)
        return cls(extra["state_cardinalities"], extra["n_actions"], spec.hidden_widths, params=params)


def _as_gates(model, mask):
    if mask is None:
        return np.ones((model.n_dims, model.layout.n_groups))
    if isinstance(mask, CausalMask):
        return mask.gates()
    return np.asarray(mask, dtype=np.float64)


def unpack_batch(batch):
    """``(s, a, s2)`` from either that triple or a full ``buffer.sample`` tuple."""
    if len(batch) >= 4:
        return batch[0], batch[1], batch[3]
    return batch[0], batch[1], batch[2]


def transition_log_likelihood(model, mask, states, actions, next_states):
    """Per-transition, per-dim log-likelihood ``(d, B)``."""
    logp = model.log_probs(states, actions, _as_gates(model, mask))
    nxt = np.asarray(next_states, dtype=np.int64).T[..., None]
    return np.take_along_axis(logp, nxt, axis=-1)[..., 0]


def masked_log_likelihood(model, mask, batch):
    """Mean over transitions of the summed per-dim log-likelihood."""
    states, actions, next_states = unpack_batch(batch)
    if len(states) == 0:
        raise UsageError("empty batch")
    ll = transition_log_likelihood(model, mask, states, actions, next_states)
    return float(ll.sum(axis=0).mean())


def dense_log_likelihood(model, batch):
    """Reference path with no gating at all."""
    states, actions, next_states = unpack_batch(batch)
    logp = nn.log_softmax(model.index_logits(states, actions, None))
    nxt = np.asarray(next_states, dtype=np.int64).T[..., None]
    return float(np.take_along_axis(logp, nxt, axis=-1)[..., 0].sum(axis=0).mean())


def predict_next_distribution(model, mask, states, actions):
    """Per-dim categorical probabilities, ``(B, d, kmax)`` (or ``(d, kmax)`` for one query)."""
    single = np.asarray(states).ndim == 1
    logp = model.log_probs(states, np.atleast_1d(actions), _as_gates(model, mask))
    probs = np.exp(logp).transpose(1, 0, 2)
    return probs[0] if single else probs


@dataclass
class DropoutSchedule:
    """Random input-group gates used while training the dynamics model.

    Each (target dim, sample) independently draws one of: all inputs kept,
    exactly one random group dropped, or each group kept with probability
    ``bernoulli_keep``.
    """

    p_full: float = 0.4
    p_leave_one_out: float = 0.4
    p_bernoulli: float = 0.2
    bernoulli_keep: float = 0.5

    def sample(self, rng, d, batch, groups):
        p = np.array([self.p_full, self.p_leave_one_out, self.p_bernoulli])
        mode = rng.choice(3, size=(d, batch), p=p / p.sum())
        gates = np.ones((d, batch, groups))
        drop = rng.integers(groups, size=(d, batch))
        loo = mode == 1
        gates[loo, drop[loo]] = 0.0
        bern = mode == 2
        gates[bern] = (rng.random((int(bern.sum()), groups)) < self.bernoulli_keep).astype(np.float64)
        return gates


def nll_step_grads(model, x, gates, next_states):
    """Mean NLL (summed over dims) and parameter gradients for one batch."""
    xin = model.gated_input(x, gates) if gates is not None else np.broadcast_to(x, (model.n_dims, *x.shape))
    out, cache = nn.forward_cache(model.spec, model.params, xin)
    logits = out + model.logit_mask
    B = x.shape[0]
    nxt = np.asarray(next_states, dtype=np.int64).T
    loss = float(nn.categorical_nll(logits, nxt).sum() / B)
    g = nn.categorical_nll_grad(logits, nxt) / B
    grads, gin = nn.backward(model.spec, model.params, xin, g, cache)
    return loss, grads, gin, xin


def train_dynamics(model, buffer, steps, rng, schedule=None, batch_size=64, learning_rate=1e-4,
                   opt=None, prediction_steps=1, log_every=0, logger=None):
    """Minimise the per-dimension NLL with random input-group dropout.

    Returns ``(model, opt, losses)`` where ``losses`` holds the mean loss of
    each ``log_every`` window (empty when ``log_every == 0``).
    """
    if len(buffer) < batch_size:
        raise UsageError(f"buffer holds {len(buffer)} transitions, need at least {batch_size}")
    schedule = schedule or DropoutSchedule()
    opt = opt or nn.OptimizerState.for_params(model.params, learning_rate)
    G = model.layout.n_groups
    losses, window = [], []
    pairs = buffer.consecutive_indices() if prediction_steps == 2 else None
    for step in range(steps):
        try:
            if pairs is not None and len(pairs):
                idx = pairs[rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)]
                loss, grads = _two_step_grads(model, buffer, idx, rng, schedule)
            else:
                s, a, _r, s2 = buffer.sample(batch_size, rng)[:4]
                gates = schedule.sample(rng, model.n_dims, len(s), G)
                loss, grads, _, _ = nll_step_grads(model, model.layout.encode(s, a), gates, s2)
        except nn.NumericError as exc:
            raise nn.NumericError(f"dynamics training diverged at step {step}: {exc}", exc.layer, step) from exc
        if not np.isfinite(loss):
            raise nn.NumericError(f"dynamics loss diverged at step {step}", step=step)
        nn.optimizer_step(opt, model.params, grads)
        if log_every:
            window.append(loss)
            if (step + 1) % log_every == 0:
                losses.append(float(np.mean(window)))
                window = []
                if logger:
                    logger.info("dynamics step %d loss %.4f", step + 1, losses[-1])
    return model, opt, losses


def _two_step_grads(model, buffer, idx, rng, schedule):
    G = model.layout.n_groups
    s, a, s1 = buffer.states[idx], buffer.actions[idx], buffer.next_states[idx]
    a1, s2 = buffer.actions[idx + 1], buffer.next_states[idx + 1]
    gates = schedule.sample(rng, model.n_dims, len(s), G)
    loss1, g1, _, _ = nll_step_grads(model, model.layout.encode(s, a), gates, s1)
    pred = np.argmax(model.index_logits(s, a), axis=-1).T
    loss2, g2, _, _ = nll_step_grads(model, model.layout.encode(pred, a1), gates, s2)
    grads = nn.ParameterSet([x + y for x, y in zip(g1.weights, g2.weights)],
                            [x + y for x, y in zip(g1.biases, g2.biases)], g1.stack)
    return loss1 + loss2, grads


# -- reward model ------------------------------------------------------------------

class RewardModel:
    def __init__(self, state_cardinalities, n_actions, hidden=(64, 64), keep=None, rng=None, params=None):
        self.layout = InputLayout(tuple(int(c) for c in state_cardinalities), int(n_actions))
        self.spec = nn.MlpSpec(self.layout.width, tuple(hidden), 1)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = params if params is not None else nn.ParameterSet.init(self.spec, rng)
        d = self.layout.n_dims
        self.keep = np.ones(d, dtype=np.int64) if keep is None else np.asarray(keep, dtype=np.int64)

    def feature_gate(self):
        g = np.append(self.keep, 1).astype(np.float64)
        return g[self.layout.feature_group]

    def features(self, states, actions):
        return self.layout.encode(states, actions) * self.feature_gate()

    def predict(self, states, actions):
        return nn.forward(self.spec, self.params, self.features(states, actions))[..., 0]

    def save(self, path):
        extra = {
            "kind": "reward",
            "state_cardinalities": list(self.layout.state_cardinalities),
            "n_actions": self.layout.n_actions,
            "keep": self.keep.tolist(),
        }
        return nn.save_checkpoint(path, self.spec, self.params, extra=extra)

    @classmethod
    def load(cls, path):
        spec, params, _opt, extra = nn.load_checkpoint(path)
        return cls(extra["state_cardinalities"], extra["n_actions"], spec.hidden_widths, extra["keep"], params=params)


def train_reward(rmodel, buffer, mask=None, steps=2000, rng=None, batch_size=32, learning_rate=3e-4,
                 goal_dims=None, opt=None):
    """Fit the reward model by squared error (unit-variance Gaussian likelihood).

    When ``mask`` is given the abstraction is recomputed from it before training.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if mask is not None:
        goal_dims = range(rmodel.layout.n_dims) if goal_dims is None else goal_dims
        rmodel.keep = state_abstraction(mask, goal_dims)
    if len(buffer) == 0:
        raise UsageError("cannot train the reward model on an empty buffer")
    opt = opt or nn.OptimizerState.for_params(rmodel.params, learning_rate)
    bs = min(batch_size, len(buffer))
    for step in range(steps):
        s, a, r = buffer.sample(bs, rng)[:3]
        x = rmodel.features(s, a)
        out, cache = nn.forward_cache(rmodel.spec, rmodel.params, x)
        err = out[:, 0] - r
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise nn.NumericError(f"reward loss diverged at step {step}", step=step)
        grads, _ = nn.backward(rmodel.spec, rmodel.params, x, (2.0 * err / len(r))[:, None], cache)
        nn.optimizer_step(opt, rmodel.params, grads)
    return rmodel


# -- replay buffer -------------------------------------------------------------------

BUFFER_FORMAT = "ecl-replay"
BUFFER_VERSION = 1


class ReplayBuffer:
    """Fixed-capacity transition store with ring eviction."""

    def __init__(self, state_cardinalities, n_actions, capacity=200_000):
        self.state_cardinalities = tuple(int(c) for c in state_cardinalities)
        self.n_actions = int(n_actions)
        self.capacity = int(capacity)
        d = len(self.state_cardinalities)
        self._s = np.zeros((self.capacity, d), dtype=np.int64)
        self._a = np.zeros(self.capacity, dtype=np.int64)
        self._r = np.zeros(self.capacity, dtype=np.float64)
        self._s2 = np.zeros((self.capacity, d), dtype=np.int64)
        self._ep = np.zeros(self.capacity, dtype=np.int64)
        self._t = np.zeros(self.capacity, dtype=np.int64)
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    def _order(self):
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    # chronological views
    states = property(lambda self: self._s[self._order()])
    actions = property(lambda self: self._a[self._order()])
    rewards = property(lambda self: self._r[self._order()])
    next_states = property(lambda self: self._s2[self._order()])
    episode_ids = property(lambda self: self._ep[self._order()])
    timesteps = property(lambda self: self._t[self._order()])

    def add(self, s, a, r, s2, episode_id=0, t=0):
        i = self._next
        self._s[i], self._a[i], self._r[i], self._s2[i] = s, a, r, s2
        self._ep[i], self._t[i] = episode_id, t
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, other):
        for rec in zip(other.states, other.actions, other.rewards, other.next_states, other.episode_ids, other.timesteps):
            self.add(*rec)
        return self

    def arrays(self):
        o = self._order()
        return self._s[o], self._a[o], self._r[o], self._s2[o], self._ep[o], self._t[o]

    def sample(self, batch_size, rng):
        """Uniform batch without replacement; returns ``(s, a, r, s2, ep, t)``."""
        n = self._size
        if batch_size > n:
            raise UsageError(f"cannot sample {batch_size} from {n} transitions")
        idx = rng.choice(n, size=batch_size, replace=False)
        return self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._ep[idx], self._t[idx]

    def consecutive_indices(self):
        """Chronological indices ``i`` whose record ``i + 1`` continues the same episode."""
        ep, t = self.episode_ids, self.timesteps
        ok = (ep[1:] == ep[:-1]) & (t[1:] == t[:-1] + 1)
        return np.flatnonzero(ok)

    @classmethod
    def union(cls, *buffers, capacity=None):
        first = buffers[0]
        total = sum(len(b) for b in buffers)
        out = cls(first.state_cardinalities, first.n_actions, capacity or max(total, 1))
        for b in buffers:
            out.extend(b)
        return out

    def copy(self):
        return ReplayBuffer.union(self, capacity=self.capacity)

    def save(self, path):
        """Line-delimited JSON: a header object, then one ``[s, a, r, s2, ep, t]`` list per line."""
        header = {
            "format": BUFFER_FORMAT,
            "version": BUFFER_VERSION,
            "state_cardinalities": list(self.state_cardinalities),
            "n_actions": self.n_actions,
            "capacity": self.capacity,
            "size": len(self),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for s, a, r, s2, ep, t in zip(*self.arrays()):
                fh.write(json.dumps([s.tolist(), int(a), float(r), s2.tolist(), int(ep), int(t)]) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != BUFFER_FORMAT:
                raise UsageError(f"{path}: not a replay buffer file")
            buf = cls(header["state_cardinalities"], header["n_actions"], header["capacity"])
            for line in fh:
                if line.strip():
                    s, a, r, s2, ep, t = json.loads(line)
                    buf.add(s, a, r, s2, ep, t)
        return buf
