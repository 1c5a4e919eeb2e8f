"""Small feed-forward networks with explicit backward passes and Adam.

Parameters are stored per layer as ``W`` with shape ``(fan_in, fan_out)`` and
``b`` with shape ``(fan_out,)``.  A *stacked* parameter set holds ``S``
independent networks of the same architecture: ``W`` is ``(S, fan_in, fan_out)``
and ``b`` is ``(S, 1, fan_out)``, and inputs are shaped ``(S, batch, fan_in)``.
Broadcasting through ``np.matmul`` lets every routine below handle both layouts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "ecl-mlp"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised for shape or architecture mismatches."""


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up in a gradient or loss."""

    def __init__(self, message, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden_widths: tuple = ()
    output_width: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        widths = (self.input_width, *self.hidden_widths, self.output_width)
        if any(int(w) < 1 for w in widths):
            raise ConfigurationError(f"all widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        widths = (self.input_width, *self.hidden_widths, self.output_width)
        return list(zip(widths[:-1], widths[1:]))

    def to_dict(self):
        return {
            "input_width": self.input_width,
            "hidden_widths": list(self.hidden_widths),
            "output_width": self.output_width,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_width"], tuple(d["hidden_widths"]), d["output_width"], d.get("activation", "relu"))


@dataclass
class ParameterSet:
    weights: list
    biases: list
    stack: int | None = None

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator, stack: int | None = None, scale: float = 1.0):
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in spec.layer_dims:
            limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
            if stack is None:
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
            else:
                weights.append(rng.uniform(-limit, limit, size=(stack, fan_in, fan_out)))
                biases.append(np.zeros((stack, 1, fan_out)))
        return cls(weights, biases, stack)

    @classmethod
    def zeros(cls, spec: MlpSpec, stack: int | None = None):
        weights, biases = [], []
        for fan_in, fan_out in spec.layer_dims:
            if stack is None:
                weights.append(np.zeros((fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
            else:
                weights.append(np.zeros((stack, fan_in, fan_out)))
                biases.append(np.zeros((stack, 1, fan_out)))
        return cls(weights, biases, stack)

    def arrays(self):
        """Layer-ordered list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def total_count(self):
        return int(sum(a.size for a in self.arrays()))

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_count:
            raise ConfigurationError(f"flat vector has {vec.size} entries, expected {self.total_count}")
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return ParameterSet(arrays[0::2], arrays[1::2], self.stack)

    def copy(self):
        return ParameterSet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.stack)

    def map(self, fn):
        return ParameterSet([fn(w) for w in self.weights], [fn(b) for b in self.biases], self.stack)

    def check(self, spec: MlpSpec):
        if len(self.weights) != len(spec.layer_dims):
            raise ConfigurationError("layer count does not match spec")
        for k, ((fan_in, fan_out), w, b) in enumerate(zip(spec.layer_dims, self.weights, self.biases)):
            if w.shape[-2:] != (fan_in, fan_out) or b.shape[-1] != fan_out:
                raise ConfigurationError(f"layer {k}: weight {w.shape} / bias {b.shape} do not match {fan_in}->{fan_out}")


def _check_input(spec, x):
    if x.shape[-1] != spec.input_width:
        raise ConfigurationError(f"input width {x.shape[-1]} != spec input_width {spec.input_width}")


def forward_cache(spec: MlpSpec, params: ParameterSet, x):
    """Forward pass returning logits and the per-layer inputs needed by ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, x)
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = np.matmul(h, w) + b
        if k < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def forward(spec: MlpSpec, params: ParameterSet, x):
    return forward_cache(spec, params, x)[0]


def backward(spec: MlpSpec, params: ParameterSet, x, upstream_grad, cache=None):
    """Gradients of ``sum(upstream_grad * forward(x))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a
    ``ParameterSet`` laid out like ``params``.
    """
    if cache is None:
        _, cache = forward_cache(spec, params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None, :]
        cache = [a[None, :] for a in cache]
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for k in reversed(range(len(params.weights))):
        w, b = params.weights[k], params.biases[k]
        a = cache[k]
        gw[k] = np.matmul(np.swapaxes(a, -1, -2), g)
        gb[k] = g.sum(axis=-2).reshape(b.shape)
        if not (np.all(np.isfinite(gw[k])) and np.all(np.isfinite(gb[k]))):
            raise NumericError(f"non-finite gradient in layer {k}", layer=k)
        g = np.matmul(g, np.swapaxes(w, -1, -2))
        if k > 0:
            g = g * (a > 0)
    if squeeze:
        g = g[0]
    return ParameterSet(gw, gb, params.stack), g


def log_softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def categorical_nll(logits, target):
    """``-log softmax(logits)[target]``; works on a single vector or a batch."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    k = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"target index out of range for {k} classes")
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, target[..., None].astype(np.int64), axis=-1)[..., 0]
    return -picked


def categorical_nll_grad(logits, target):
    """Gradient of ``categorical_nll`` w.r.t. logits: ``softmax - onehot``."""
    p = softmax(np.asarray(logits, dtype=np.float64))
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, np.asarray(target)[..., None].astype(np.int64), 1.0, axis=-1)
    return p - onehot


@dataclass
class OptimizerState:
    learning_rate: float
    m: ParameterSet
    v: ParameterSet
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, learning_rate: float, **kw):
        zeros = params.map(np.zeros_like)
        return cls(learning_rate, zeros, zeros.copy(), **kw)


def optimizer_step(state: OptimizerState, params: ParameterSet, grads: ParameterSet):
    """One Adam update. Mutates and returns ``(params, state)``."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if p.shape != g.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Adam over a plain list of arrays (used for mask logits and the like)."""

    def __init__(self, arrays, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_norm(grads: ParameterSet, max_norm: float):
    norm = float(np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays())))
    if norm > max_norm > 0:
        grads = grads.map(lambda a: a * (max_norm / norm))
    return grads, norm


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, spec: MlpSpec, params: ParameterSet, opt: OptimizerState | None = None, extra=None):
    """Write an ``.npz`` checkpoint.

    Layout: ``header`` (JSON string with format, version, spec, stack, extra
    metadata), ``params`` (flat float64 vector in ``[W0, b0, W1, b1, ...]``
    order, each array C-order), and optionally ``adam_m``, ``adam_v``,
    ``adam_meta`` (``[step_count, lr, beta1, beta2, eps]``).
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "stack": params.stack,
        "extra": extra or {},
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)), "params": params.flat()}
    if opt is not None:
        arrays["adam_m"] = opt.m.flat()
        arrays["adam_v"] = opt.v.flat()
        arrays["adam_meta"] = np.array([opt.step_count, opt.learning_rate, opt.beta1, opt.beta2, opt.eps])
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: returns ``(spec, params, opt_or_None, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path}: not an MLP checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: checkpoint version {header['version']} is newer than supported")
        spec = MlpSpec.from_dict(header["spec"])
        template = ParameterSet.zeros(spec, stack=header["stack"])
        params = template.with_flat(data["params"])
        opt = None
        if "adam_m" in data:
            step, lr, b1, b2, eps = data["adam_meta"]
            opt = OptimizerState(
                float(lr), template.with_flat(data["adam_m"]), template.with_flat(data["adam_v"]),
                int(step), float(b1), float(b2), float(eps),
            )
    return spec, params, opt, header["extra"]
