"""Feedforward sigmoid network with a softmax output, written out by hand.

The parameter vector has a fixed flat layout used everywhere (gradients,
Jacobians, the protocol's encrypted y-term): for each layer in order, the
weight matrix ``(out, in)`` row-major, then that layer's bias vector. The
output layer carries no bias.

The central quantity is the per-sample Jacobian of the logits with respect
to the parameters, ``dz_i(s)/dtheta``. Since the cross-entropy gradient of a
sample is ``sum_i (p_i - y_i) dz_i/dtheta``, the batch gradient splits into a
label-free part (weighted by ``p``) and a label part (weighted by ``y``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rngs

PROB_FLOOR = 1e-15
_MAGIC = b"CANN"


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        total = 0
        for l, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            total += n_in * n_out + (n_out if l < self.n_layers - 1 else 0)
        return total

    @property
    def n_last_layer(self) -> int:
        """R, the number of weights feeding the output layer."""
        return self.sizes[-2] * self.sizes[-1]


@dataclass
class NetworkParams:
    spec: LayerSpec
    weights: list
    biases: list  # one per hidden layer

    def flat(self) -> np.ndarray:
        parts = []
        for l, w in enumerate(self.weights):
            parts.append(w.ravel())
            if l < len(self.biases):
                parts.append(self.biases[l])
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec: LayerSpec, vec) -> "NetworkParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {vec.shape}")
        weights, biases, pos = [], [], 0
        for l, (n_in, n_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
            weights.append(vec[pos:pos + n_in * n_out].reshape(n_out, n_in).copy())
            pos += n_in * n_out
            if l < spec.n_layers - 1:
                biases.append(vec[pos:pos + n_out].copy())
                pos += n_out
        return cls(spec, weights, biases)

    def weight_mask(self) -> np.ndarray:
        """1.0 at weight positions of the flat layout, 0.0 at bias positions."""
        return NetworkParams(
            self.spec,
            [np.ones_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
        ).flat()

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_bytes(self) -> bytes:
        head = _MAGIC + struct.pack("<I", self.spec.n_layers)
        for w in self.weights:
            head += struct.pack("<II", *w.shape)
        return head + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NetworkParams":
        if blob[:4] != _MAGIC:
            raise ValueError("bad parameter blob magic")
        (n_layers,) = struct.unpack_from("<I", blob, 4)
        shapes = [struct.unpack_from("<II", blob, 8 + 8 * l) for l in range(n_layers)]
        sizes = [shapes[0][1]] + [s[0] for s in shapes]
        spec = LayerSpec(tuple(sizes))
        offset = 8 + 8 * n_layers
        vec = np.frombuffer(blob, dtype="<f8", count=spec.n_params, offset=offset)
        return cls.from_flat(spec, vec.astype(float))


@dataclass
class ForwardTrace:
    activations: list  # activations[0] is the input batch, then each hidden layer
    z: np.ndarray  # (B, K) logits
    p: np.ndarray  # (B, K) softmax probabilities

    @property
    def batch_size(self) -> int:
        return self.z.shape[0]


def init_params(spec: LayerSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights and zero biases."""
    rng = rngs.stream(seed, rngs.INIT)
    weights, biases = [], []
    for l, (n_in, n_out) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        if l < spec.n_layers - 1:
            biases.append(np.zeros(n_out))
    return NetworkParams(spec, weights, biases)


def stable_sigmoid(x):
    """Logistic function evaluated so that ``exp`` only ever sees non-positive arguments."""
    x = np.asarray(x, dtype=float)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: NetworkParams, features) -> ForwardTrace:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    if x.shape[1] != params.spec.d_in:
        raise ValueError(f"expected {params.spec.d_in} features, got {x.shape[1]}")
    acts = [x]
    h = x
    for l, w in enumerate(params.weights[:-1]):
        h = stable_sigmoid(h @ w.T + params.biases[l])
        acts.append(h)
    z = h @ params.weights[-1].T
    return ForwardTrace(acts, z, softmax(z))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(trace: ForwardTrace, one_hot_labels) -> float:
    """Mean of ``-ln p_c`` over the rows of the trace."""
    y = np.atleast_2d(np.asarray(one_hot_labels, dtype=float))
    pc = np.clip((trace.p * y).sum(axis=1), PROB_FLOOR, None)
    return float(-np.log(pc).mean())


def last_layer_z_grads(trace: ForwardTrace) -> np.ndarray:
    """``dz_i(s)/dw`` for the output weights only, shape ``(B, K, K*h)``.

    Row ``i`` is nonzero only in the block of output unit ``i``, where it equals
    the last hidden activation.
    """
    a = trace.activations[-1]
    B, h = a.shape
    K = trace.z.shape[1]
    out = np.zeros((B, K, K, h))
    idx = np.arange(K)
    out[:, idx, idx, :] = a[:, None, :]
    return out.reshape(B, K, K * h)


def z_jacobian(params: NetworkParams, trace: ForwardTrace) -> np.ndarray:
    """``dz_i(s)/dtheta`` for every parameter in the flat layout, shape ``(B, K, P)``."""
    B, K = trace.z.shape
    blocks = [None] * (2 * params.spec.n_layers)
    blocks[-2] = last_layer_z_grads(trace)
    # g[s, i, j] = dz_i / d(activation j of the current layer)
    g = np.broadcast_to(params.weights[-1], (B, K, params.weights[-1].shape[1]))
    for l in range(params.spec.n_layers - 2, -1, -1):
        a = trace.activations[l + 1]
        g_pre = g * (a * (1.0 - a))[:, None, :]
        a_in = trace.activations[l]
        blocks[2 * l] = (g_pre[:, :, :, None] * a_in[:, None, None, :]).reshape(B, K, -1)
        blocks[2 * l + 1] = g_pre
        g = g_pre @ params.weights[l]
    return np.concatenate([b for b in blocks if b is not None], axis=2)


def p_term(probs, z_grads) -> np.ndarray:
    """Label-free half of the batch gradient: mean over s of sum_i p_i(s) dz_i(s)/dw."""
    probs = np.atleast_2d(probs)
    return np.einsum("si,sir->r", probs, z_grads) / probs.shape[0]


def y_term_clear(one_hot_labels, z_grads) -> tuple[np.ndarray, np.ndarray]:
    """Label half of the batch gradient. Returns ``(N_B / |B|, N_B)``."""
    y = np.atleast_2d(one_hot_labels)
    total = np.einsum("si,sir->r", y, z_grads)
    return total / y.shape[0], total


def assemble_gradient(p_part, y_part) -> np.ndarray:
    p_part, y_part = np.asarray(p_part), np.asarray(y_part)
    if p_part.shape != y_part.shape:
        raise ValueError(f"length mismatch: {p_part.shape} vs {y_part.shape}")
    return p_part - y_part


def backprop(params: NetworkParams, trace: ForwardTrace, deltas, l2: float = 0.0) -> np.ndarray:
    """Flat gradient of the batch mean loss given per-sample output deltas ``dL/dz``.

    With ``deltas = p - y`` this is the ordinary cross-entropy gradient. ``l2``
    adds ``l2 * w`` on weight entries (biases are not regularized).
    """
    deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
    B = deltas.shape[0]
    n = params.spec.n_layers
    gw, gb = [None] * n, [None] * (n - 1)
    d = deltas
    for l in range(n - 1, -1, -1):
        gw[l] = d.T @ trace.activations[l] / B
        if l < n - 1:
            gb[l] = d.sum(axis=0) / B
        if l > 0:
            a = trace.activations[l]
            d = (d @ params.weights[l]) * a * (1.0 - a)
    grad = NetworkParams(params.spec, gw, gb)
    flat = grad.flat()
    if l2:
        flat = flat + l2 * params.flat() * params.weight_mask()
    return flat


hidden_grads = backprop


def sgd_step(params: NetworkParams, grad, lr: float, l2: float = 0.01) -> NetworkParams:
    """``w <- w - lr * (grad + l2 * w)`` with biases excluded from the L2 term."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains non-finite entries")
    w = params.flat()
    new = w - lr * (grad + l2 * w * params.weight_mask())
    return NetworkParams.from_flat(params.spec, new)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.1
    l2: float = 0.01


def batch_schedule(n_rows: int, batch_size: int, epochs: int, seed: int):
    """Yield ``(epoch, batch_index, row_indices)``; reshuffled each epoch, last partial batch kept."""
    rng = rngs.stream(seed, rngs.SHUFFLE)
    for epoch in range(epochs):
        order = rng.permutation(n_rows)
        for b, start in enumerate(range(0, n_rows, batch_size)):
            yield epoch, b, order[start:start + batch_size]


def train_plaintext(features, labels, spec: LayerSpec, config: TrainConfig, seed: int,
                    init: NetworkParams | None = None) -> NetworkParams:
    x = np.asarray(features, dtype=float)
    y = one_hot(labels, spec.n_classes)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    params = init.copy() if init is not None else init_params(spec, seed)
    for _, _, idx in batch_schedule(x.shape[0], config.batch_size, config.epochs, seed):
        trace = forward(params, x[idx])
        grad = backprop(params, trace, trace.p - y[idx])
        params = sgd_step(params, grad, config.lr, config.l2)
    return params


def predict(params: NetworkParams, features) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(forward(params, features).p, axis=1)


def evaluate(params: NetworkParams, features, labels) -> float:
    labels = np.asarray(labels, dtype=int)
    if labels.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(predict(params, features) == labels))
