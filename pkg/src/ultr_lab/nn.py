"""A small dense feed-forward engine with hand-written backpropagation.

Parameters live in plain float64 numpy arrays. A network is a list of
``(W, b, activation)`` layers with ``W`` shaped ``(fan_in, fan_out)``;
``forward`` accepts a single vector or a row-major batch.

Supported losses (all averaged over the batch):

``bce_logit``
    binary cross-entropy on logits, targets in [0, 1]
``squared_error``
    ``mean((z - t) ** 2)``
``listwise_softmax_ce``
    per group, cross-entropy between a target distribution and
    ``softmax(z)``; averaged over groups
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_expit

from .errors import TrainingError, ValidationError

ACTIVATIONS = ("relu", "identity")
LOSSES = ("bce_logit", "squared_error", "listwise_softmax_ce")


@dataclass(eq=False)
class DenseNet:
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValidationError("layer lists must be non-empty and of equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValidationError(f"layer {i}: input {w.shape[0]} does not chain with previous output")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params) -> "DenseNet":
        return DenseNet(list(params[0::2]), list(params[1::2]), list(self.activations))

    def copy(self) -> "DenseNet":
        return self.with_params([p.copy() for p in self.params()])


def init_dense(sizes, seed=0, activations=None) -> DenseNet:
    """Glorot-uniform weights and zero biases; ReLU hidden, linear output."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_layers = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases, list(activations))


def zeros_like_net(net: DenseNet) -> DenseNet:
    return net.with_params([np.zeros_like(p) for p in net.params()])


def _check_input(net: DenseNet, x: np.ndarray):
    if x.shape[-1] != net.input_dim:
        raise ValidationError(f"input has dimension {x.shape[-1]}, network expects {net.input_dim}")


def forward(net: DenseNet, x) -> np.ndarray:
    out, _ = forward_cache(net, x)
    return out


def forward_cache(net: DenseNet, x):
    """Forward pass that also returns the per-layer inputs and pre-activations."""
    h = np.asarray(x, dtype=np.float64)
    _check_input(net, h)
    cache = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if act == "relu" else z
    return h, cache


def embed(net: DenseNet, x) -> np.ndarray:
    """Activations feeding the final layer (the penultimate representation)."""
    h = np.asarray(x, dtype=np.float64)
    _check_input(net, h)
    for w, b, act in zip(net.weights[:-1], net.biases[:-1], net.activations[:-1]):
        z = h @ w + b
        h = np.maximum(z, 0.0) if act == "relu" else z
    return h


def backward_from_output(net: DenseNet, cache, dout) -> list:
    """Gradients of a scalar loss given ``dL/d(output)`` for a batch."""
    grads = [None] * (2 * len(net.weights))
    delta = np.asarray(dout, dtype=np.float64)
    for i in range(len(net.weights) - 1, -1, -1):
        h, z = cache[i]
        if net.activations[i] == "relu":
            delta = delta * (z > 0.0)
        if h.ndim == 1:
            grads[2 * i] = np.outer(h, delta)
            grads[2 * i + 1] = delta.copy()
        else:
            grads[2 * i] = h.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = delta @ net.weights[i].T
    return grads


# --- losses -----------------------------------------------------------------


def group_ids_from_sizes(sizes) -> np.ndarray:
    return np.repeat(np.arange(len(sizes)), sizes)


def _group_softmax(z, groups):
    starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    zmax = np.maximum.reduceat(z, starts)
    sizes = np.diff(np.r_[starts, len(z)])
    shifted = z - np.repeat(zmax, sizes)
    e = np.exp(shifted)
    denom = np.add.reduceat(e, starts)
    logp = shifted - np.repeat(np.log(denom), sizes)
    return logp, starts, sizes


def loss_and_grad(kind: str, z, target, groups=None):
    """Mean loss and its gradient w.r.t. the raw model outputs ``z``."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    n = z.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    if kind == "bce_logit":
        loss = -np.mean(t * log_expit(z) + (1.0 - t) * log_expit(-z))
        return float(loss), (expit(z) - t) / n
    if kind == "squared_error":
        diff = z - t
        return float(np.mean(diff * diff)), 2.0 * diff / n
    if kind == "listwise_softmax_ce":
        if groups is None:
            raise ValidationError("listwise loss needs group ids")
        groups = np.asarray(groups)
        logp, starts, _ = _group_softmax(z, groups)
        n_groups = len(starts)
        loss = -np.add.reduceat(t * logp, starts).sum() / n_groups
        return float(loss), (np.exp(logp) - t) / n_groups
    raise ValidationError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def backward(net: DenseNet, x, target, loss: str, groups=None, batch_index=None):
    """Return ``(gradients, loss_value)`` of the mean batch loss.

    The network must have a single output unit.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("backward needs a non-empty 2-D batch")
    out, cache = forward_cache(net, x)
    value, dz = loss_and_grad(loss, out[:, 0], target, groups)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {loss} loss", batch_index)
    return backward_from_output(net, cache, dz[:, None]), value


def finite_diff_check(net: DenseNet, x, target, loss: str, h: float = 1e-5, groups=None,
                      grads=None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per entry the error is ``|a - n| / max(|a| + |n|, floor)``; ``floor``
    keeps entries whose true gradient is (near) zero from dividing rounding
    noise by zero. ``grads`` may be supplied to audit an external gradient.
    """
    if h <= 0:
        raise ValidationError("h must be positive")
    if grads is None:
        grads, _ = backward(net, x, target, loss, groups)
    params = [p.copy() for p in net.params()]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        g = grads[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp, _ = loss_and_grad(loss, forward(net.with_params(params), x)[:, 0], target, groups)
            flat[j] = orig - h
            lm, _ = loss_and_grad(loss, forward(net.with_params(params), x)[:, 0], target, groups)
            flat[j] = orig
            num = (lp - lm) / (2.0 * h)
            err = abs(g[j] - num) / max(abs(g[j]) + abs(num), floor)
            worst = max(worst, err)
    return worst


# --- optimisation -----------------------------------------------------------


@dataclass(eq=False)
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8


def adam_init(params, lr=0.01, beta1=0.9, beta2=0.999, eps_hat=1e-8) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                     0, lr, beta1, beta2, eps_hat)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("params, gradients and optimiser state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, t=t)


@dataclass
class DropoutSpec:
    tau: float = 0.0
    training_mode: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValidationError(f"dropout tau must lie in [0, 1), got {self.tau}")


def dropout_mask(shape, spec: DropoutSpec):
    """Scaled keep-mask for inverted dropout, or ``None`` when it is a no-op."""
    if not spec.training_mode or spec.tau == 0.0:
        return None
    keep = spec.rng.random(shape) >= spec.tau
    return keep / (1.0 - spec.tau)


def dropout_apply(v, spec: DropoutSpec) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    mask = dropout_mask(v.shape, spec)
    return v if mask is None else v * mask


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def check_finite_params(params, what="parameters"):
    for p in params:
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"non-finite {what} after update")


# --- checkpoints ------------------------------------------------------------

MAGIC = b"ULTRLAB\x01"


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE payload``."""
    layout = {}
    chunks = []
    offset = 0
    for name, net in nets.items():
        flat = [np.ascontiguousarray(p, dtype="<f8").reshape(-1) for p in net.params()]
        count = sum(f.size for f in flat)
        layout[name] = {"sizes": net.sizes, "activations": list(net.activations), "offset": offset, "count": count}
        chunks += flat
        offset += count
    header = json.dumps({"nets": layout, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.concatenate(chunks).astype("<f8").tobytes() if chunks else b""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def read_checkpoint_parts(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    return header, blob[16 + hlen:]


def load_checkpoint(path):
    """Return ``(nets, meta)`` exactly as saved."""
    header, payload = read_checkpoint_parts(path)
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    nets = {}
    for name, spec in header["nets"].items():
        sizes, pos = spec["sizes"], spec["offset"]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params.append(values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            pos += fan_in * fan_out
            params.append(values[pos:pos + fan_out].copy())
            pos += fan_out
        nets[name] = DenseNet(params[0::2], params[1::2], spec["activations"])
    return nets, header["meta"]
