"""Dense network engine: forward, analytic backward, losses, momentum SGD.

Everything runs in float64 numpy. Networks are plain records of layer
arrays, so they can be cloned, checkpointed to text, and compared bitwise.
There is no autodiff here: every gradient is written out by hand and is
expected to match central finite differences (the test suite enforces it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "linear")

CHECKPOINT_MAGIC = "mlp-checkpoint v1"

# %.17g round-trips any float64 exactly.
FLOAT_FMT = "%.17g"


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class DomainError(ValueError):
    """A numeric argument is outside its valid range."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class StateError(RuntimeError):
    """Operation invoked out of order, e.g. backward without a cached forward."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "linear"


@dataclass
class Batch:
    """One minibatch: features, integer labels, optional loss weights and ids."""

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-d, got shape {self.features.shape}")
        if self.features.shape[0] == 0:
            raise ShapeError("batch must contain at least one row")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("labels must be one int per feature row")
        if self.weights is None:
            self.weights = np.ones(self.features.shape[0])
        else:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.labels.shape:
                raise ShapeError("weights must align with labels")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise DomainError("batch weights must be finite and nonnegative")

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class _ForwardCache:
    batch: Batch
    inputs: list[np.ndarray]    # input to each layer
    preacts: list[np.ndarray]   # affine outputs before activation


@dataclass
class Network:
    """An MLP as a list of layers. Hidden layers ReLU, final layer linear."""

    layers: list[Layer]
    _cache: _ForwardCache | None = field(default=None, repr=False, compare=False)

    @property
    def feature_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def class_count(self) -> int:
        return self.layers[-1].weight.shape[0]

    def clone(self) -> "Network":
        return Network([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                        for l in self.layers])


def validate_network(net: Network) -> None:
    """Check layer dims chain, activations are known, and params are finite."""
    if not net.layers:
        raise ShapeError("network needs at least one layer")
    prev_out = None
    for i, layer in enumerate(net.layers):
        w, b = layer.weight, layer.bias
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
        if prev_out is not None and w.shape[1] != prev_out:
            raise ShapeError(f"layer {i}: expects {w.shape[1]} inputs, got {prev_out}")
        if layer.activation not in ACTIVATIONS:
            raise DomainError(f"layer {i}: unknown activation {layer.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError(f"layer {i}: non-finite parameters")
        prev_out = w.shape[0]
    if net.layers[-1].activation != "linear":
        raise DomainError("final layer must be linear (it produces logits)")


def make_network(feature_dim: int, hidden: Sequence[int], class_count: int,
                 rng: np.random.Generator) -> Network:
    """Build an MLP with uniform(+-sqrt(6/(fan_in+fan_out))) init, zero biases."""
    if feature_dim < 1 or class_count < 1:
        raise DomainError("feature_dim and class_count must be positive")
    dims = [int(feature_dim), *[int(h) for h in hidden], int(class_count)]
    if any(d < 1 for d in dims):
        raise DomainError("all layer widths must be positive")
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = "linear" if k == len(dims) - 2 else "relu"
        layers.append(Layer(w, b, act))
    net = Network(layers)
    validate_network(net)
    return net


def _apply_activation(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _forward_arrays(net: Network, x: np.ndarray):
    """Run the affine/activation chain, returning per-layer inputs and preacts."""
    inputs, preacts = [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        preacts.append(z)
        a = _apply_activation(z, layer.activation)
    return a, inputs, preacts


def forward(net: Network, batch: Batch) -> np.ndarray:
    """Compute logits for a batch and cache activations for backward()."""
    if batch.features.shape[1] != net.feature_dim:
        raise ShapeError(
            f"batch has {batch.features.shape[1]} features, net expects {net.feature_dim}")
    logits, inputs, preacts = _forward_arrays(net, batch.features)
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward produced non-finite logits")
    net._cache = _ForwardCache(batch, inputs, preacts)
    return logits


def logits_of(net: Network, features: np.ndarray) -> np.ndarray:
    """Plain forward pass on a feature matrix; no cache is kept."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.feature_dim:
        raise ShapeError(f"expected (n, {net.feature_dim}) features, got {x.shape}")
    out, _, _ = _forward_arrays(net, x)
    return out


def features_of(net: Network, features: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations: the backbone embedding of each row."""
    x = np.asarray(features, dtype=float)
    if x.shape[1] != net.feature_dim:
        raise ShapeError(f"expected (n, {net.feature_dim}) features, got {x.shape}")
    if len(net.layers) == 1:
        return x
    a = x
    for layer in net.layers[:-1]:
        a = _apply_activation(a @ layer.weight.T + layer.bias, layer.activation)
    return a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_loss_inputs(logits: np.ndarray, labels: np.ndarray,
                       weights: np.ndarray | None):
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError("labels must be one int per logit row")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise DomainError("label outside [0, class_count)")
    if weights is None:
        weights = np.ones(logits.shape[0])
    else:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != labels.shape:
            raise ShapeError("weights must align with labels")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise DomainError("loss weights must be finite and nonnegative")
    return logits, labels, weights


def cross_entropy(logits: np.ndarray, labels: np.ndarray,
                  weights: np.ndarray | None = None):
    """Weighted-mean cross entropy.

    loss = sum_i w_i * nll_i / B, so all-zero weights give loss 0 and the
    gradient of row i is w_i / B * (softmax_i - onehot_i).
    Returns (loss, dloss_dlogits).
    """
    logits, labels, weights = _check_loss_inputs(logits, labels, weights)
    b = logits.shape[0]
    logp = log_softmax(logits)
    nll = -logp[np.arange(b), labels]
    loss = float(np.sum(weights * nll) / b)
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad *= weights[:, None] / b
    return loss, grad


def soft_cross_entropy(logits: np.ndarray, target_probs: np.ndarray,
                       weights: np.ndarray | None = None):
    """Cross entropy against soft label rows that each sum to 1."""
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(target_probs, dtype=float)
    if targets.shape != logits.shape:
        raise ShapeError("soft targets must match logits shape")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-9):
        raise DomainError("soft label rows must be nonnegative and sum to 1")
    b = logits.shape[0]
    if weights is None:
        weights = np.ones(b)
    else:
        weights = np.asarray(weights, dtype=float)
    logp = log_softmax(logits)
    loss = float(np.sum(weights * -(targets * logp).sum(axis=1)) / b)
    grad = (np.exp(logp) - targets) * weights[:, None] / b
    return loss, grad


def balanced_softmax_loss(logits: np.ndarray, labels: np.ndarray,
                          prior: np.ndarray, weights: np.ndarray | None = None):
    """Cross entropy on prior-compensated logits (logits + log prior).

    With a uniform prior this reduces to plain cross_entropy because the
    shift is constant across the row.
    """
    prior = np.asarray(prior, dtype=float)
    logits = np.asarray(logits, dtype=float)
    if prior.ndim != 1 or prior.shape[0] != logits.shape[1]:
        raise ShapeError("prior must have one entry per class")
    if np.any(prior <= 0):
        raise DomainError("prior must be strictly positive")
    if abs(float(prior.sum()) - 1.0) > 1e-9:
        raise DomainError("prior must sum to 1")
    return cross_entropy(logits + np.log(prior)[None, :], labels, weights)


@dataclass
class Gradients:
    """Per-layer parameter gradients, congruent with a Network's layers."""

    weight: list[np.ndarray]
    bias: list[np.ndarray]

    def congruent_with(self, net: Network) -> bool:
        return (len(self.weight) == len(net.layers)
                and all(g.shape == l.weight.shape for g, l in zip(self.weight, net.layers))
                and all(g.shape == l.bias.shape for g, l in zip(self.bias, net.layers)))


def backward(net: Network, batch: Batch, dlogits: np.ndarray) -> Gradients:
    """Backpropagate dloss/dlogits to all parameters.

    Requires forward(net, batch) to have run on this exact batch so the
    activation cache is available.
    """
    cache = net._cache
    if cache is None:
        raise StateError("backward called before forward: no activation cache")
    if cache.batch is not batch:
        raise StateError("activation cache belongs to a different batch")
    dlogits = np.asarray(dlogits, dtype=float)
    if dlogits.shape != (batch.size, net.class_count):
        raise ShapeError(f"dlogits must be ({batch.size}, {net.class_count})")

    gw = [None] * len(net.layers)
    gb = [None] * len(net.layers)
    grad = dlogits
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            grad = grad * (cache.preacts[k] > 0)
        gw[k] = grad.T @ cache.inputs[k]
        gb[k] = grad.sum(axis=0)
        if k > 0:
            grad = grad @ layer.weight
    return Gradients(gw, gb)


@dataclass
class SgdState:
    """Momentum buffers, one velocity array per parameter array."""

    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]


def make_sgd_state(net: Network) -> SgdState:
    return SgdState([np.zeros_like(l.weight) for l in net.layers],
                    [np.zeros_like(l.bias) for l in net.layers])


def sgd_step(net: Network, grads: Gradients, lr: float, momentum: float,
             weight_decay: float, state: SgdState,
             layer_mask: Sequence[bool] | None = None) -> Network:
    """One momentum-SGD update, in place.

    Velocity-accumulate convention: v <- momentum*v + (g + wd*p), p <- p - lr*v.
    layer_mask selects which layers move; masked-out layers are untouched,
    including their velocity and weight decay.
    """
    if not grads.congruent_with(net):
        raise ShapeError("gradient shapes do not match network parameters")
    if lr < 0 or momentum < 0 or weight_decay < 0:
        raise DomainError("lr, momentum, weight_decay must be nonnegative")
    if layer_mask is None:
        layer_mask = [True] * len(net.layers)
    if len(layer_mask) != len(net.layers):
        raise ShapeError("layer_mask must have one flag per layer")
    for k, layer in enumerate(net.layers):
        if not layer_mask[k]:
            continue
        gw = grads.weight[k] + weight_decay * layer.weight
        gb = grads.bias[k] + weight_decay * layer.bias
        state.velocity_w[k] = momentum * state.velocity_w[k] + gw
        state.velocity_b[k] = momentum * state.velocity_b[k] + gb
        layer.weight -= lr * state.velocity_w[k]
        layer.bias -= lr * state.velocity_b[k]
    return net


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from base_lr to 0 over total_epochs."""
    if total_epochs <= 0:
        raise DomainError("total_epochs must be positive")
    t = min(max(epoch, 0), total_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_epochs))


def save_network(net: Network, path) -> None:
    """Write a plain-text checkpoint.

    Format: a magic line, a layer count, then per layer a header
    'layer <idx> <activation> <out> <in>' followed by <out> weight rows and
    one bias row. Values use %.17g so the round trip is bit-faithful.
    """
    validate_network(net)
    lines = [CHECKPOINT_MAGIC, f"layers {len(net.layers)}"]
    for i, layer in enumerate(net.layers):
        out_dim, in_dim = layer.weight.shape
        lines.append(f"layer {i} {layer.activation} {out_dim} {in_dim}")
        for row in layer.weight:
            lines.append(" ".join(FLOAT_FMT % v for v in row))
        lines.append(" ".join(FLOAT_FMT % v for v in layer.bias))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_floats(line: str, count: int, lineno: int) -> np.ndarray:
    parts = line.split()
    if len(parts) != count:
        raise CheckpointError(f"line {lineno}: expected {count} values, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise CheckpointError(f"line {lineno}: {exc}") from None


def load_network(path) -> Network:
    """Read a checkpoint written by save_network."""
    raw = Path(path).read_text().splitlines()
    if not raw or raw[0] != CHECKPOINT_MAGIC:
        raise CheckpointError("line 1: missing checkpoint magic")
    try:
        n_layers = int(raw[1].split()[1])
    except (IndexError, ValueError):
        raise CheckpointError("line 2: malformed layer count") from None
    layers = []
    pos = 2
    for _ in range(n_layers):
        if pos >= len(raw):
            raise CheckpointError(f"line {pos + 1}: truncated checkpoint")
        head = raw[pos].split()
        if len(head) != 5 or head[0] != "layer":
            raise CheckpointError(f"line {pos + 1}: malformed layer header")
        act, out_dim, in_dim = head[2], int(head[3]), int(head[4])
        if act not in ACTIVATIONS:
            raise CheckpointError(f"line {pos + 1}: unknown activation {act!r}")
        pos += 1
        if pos + out_dim + 1 > len(raw):
            raise CheckpointError(f"line {pos + 1}: truncated layer block")
        w = np.stack([_parse_floats(raw[pos + r], in_dim, pos + r + 1)
                      for r in range(out_dim)])
        pos += out_dim
        b = _parse_floats(raw[pos], out_dim, pos + 1)
        pos += 1
        layers.append(Layer(w, b, act))
    net = Network(layers)
    validate_network(net)
    return net
