"""Minimal dense-network framework: forward/backward, dropout, Adam, MSE/BCE.

Parameters are float32 by default; float64 is available for gradient checks.
Training is single-threaded and fully deterministic for a given seed: batch
shuffling and dropout masks come from one seeded generator, consumed in a
fixed order.

Dropout is inverted (activations scaled by 1/(1-rate) at train time) and sits
between layers only, never on the input or after the final layer; rate 0 is
exactly the identity.

Checkpoint layout (little-endian)::

    magic "NNCKPT01" | u32 version=1 | u8 dtype code (4|8) | u8 layer count
    | 2 pad | f64 dropout_rate
    per layer: u32 in_dim | u32 out_dim | u8 activation | 3 pad
    per layer: raw weight block then bias block
    sha256 digest of everything above     -> final 32 bytes
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CheckpointError

CKPT_MAGIC = b"NNCKPT01"
CKPT_VERSION = 1

ADAM_ALPHA = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

BCE_CLAMP = 1e-7


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    LINEAR = "linear"


_ACT_CODES = {Activation.RELU: 1, Activation.SIGMOID: 2, Activation.LINEAR: 3}
_CODE_ACTS = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray     # (out_dim,)
    activation: Activation

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ValueError("bias length must match out_dim")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[1])


@dataclass
class Network:
    layers: list[DenseLayer]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def copy(self) -> "Network":
        return Network(layers=[DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                               for l in self.layers],
                       dropout_rate=self.dropout_rate)


def init_layer(in_dim: int, out_dim: int, activation: Activation,
               rng: np.random.Generator, dtype=np.float32) -> DenseLayer:
    """Scaled-uniform init: He-style for RELU, Glorot-style otherwise; zero bias."""
    if activation is Activation.RELU:
        limit = np.sqrt(6.0 / in_dim)
    else:
        limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype)
    b = np.zeros(out_dim, dtype=dtype)
    return DenseLayer(weights=w, bias=b, activation=activation)


def build_network(dims, activations, dropout_rate: float = 0.0, seed: int = 0,
                  dtype=np.float32) -> Network:
    """Build a dense stack: dims [d0, d1, ..., dL], one activation per layer."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = [init_layer(dims[i], dims[i + 1], act, rng, dtype=dtype)
              for i, act in enumerate(activations)]
    return Network(layers=layers, dropout_rate=dropout_rate)


def _apply_activation(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0)
    if act is Activation.SIGMOID:
        # Stable on both tails.
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if act is Activation.SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class ForwardCache:
    """Everything backward() needs: per-layer pre-activations, activations,
    the dropout masks that were applied, and the layer inputs."""

    inputs: list[np.ndarray]       # inputs[i] fed layer i
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # post-activation, pre-dropout
    masks: list[np.ndarray | None]  # masks[i] applied to activations[i], None if none
    output: np.ndarray = field(init=False)

    def __post_init__(self):
        self.output = self.activations[-1]


def forward(net: Network, batch: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardCache:
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"batch must be (rows, {net.in_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input batch")
    use_dropout = training and net.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("training with dropout needs an rng")

    inputs, zs, acts, masks = [], [], [], []
    keep = 1.0 - net.dropout_rate
    for i, layer in enumerate(net.layers):
        inputs.append(x)
        z = x @ layer.weights + layer.bias
        a = _apply_activation(z, layer.activation)
        zs.append(z)
        acts.append(a)
        last = i == len(net.layers) - 1
        if use_dropout and not last:
            mask = (rng.random(a.shape) >= net.dropout_rate).astype(net.dtype)
            masks.append(mask)
            x = a * mask / keep
        else:
            masks.append(None)
            x = a
    return ForwardCache(inputs=inputs, pre_activations=zs, activations=acts, masks=masks)


def backward(net: Network, cache: ForwardCache, loss_grad: np.ndarray,
             ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate d(loss)/d(output); returns per-layer (dW, db)."""
    if loss_grad.shape != cache.output.shape:
        raise ValueError("loss_grad shape must match the forward output")
    keep = 1.0 - net.dropout_rate
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    delta = np.asarray(loss_grad, dtype=net.dtype)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        dz = delta * _activation_grad(cache.pre_activations[i], cache.activations[i],
                                      layer.activation)
        grads[i] = (cache.inputs[i].T @ dz, dz.sum(axis=0))
        if i > 0:
            delta = dz @ layer.weights.T
            if cache.masks[i - 1] is not None:
                delta = delta * cache.masks[i - 1] / keep
    return grads


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if prediction.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    diff = prediction - target
    value = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return value, grad


def bce_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    if prediction.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    p = np.clip(prediction, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = target
    value = float(np.mean(-(y * np.log(p.astype(np.float64))
                            + (1.0 - y) * np.log1p(-p.astype(np.float64)))))
    inside = ((prediction > BCE_CLAMP) & (prediction < 1.0 - BCE_CLAMP)).astype(prediction.dtype)
    grad = inside * (p - y) / (p * (1.0 - p)) / p.size
    return value, grad.astype(prediction.dtype)


_LOSSES = {"mse": mse_loss, "bce": bce_loss}


def loss(kind: str, prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}") from None
    return fn(prediction, target)


@dataclass
class AdamState:
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    t: int = 0
    alpha: float = ADAM_ALPHA
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_network(cls, net: Network, alpha: float = ADAM_ALPHA) -> "AdamState":
        zeros = lambda l: (np.zeros_like(l.weights), np.zeros_like(l.bias))
        return cls(m=[zeros(l) for l in net.layers], v=[zeros(l) for l in net.layers],
                   alpha=alpha)


def adam_step(net: Network, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the network parameters."""
    for dw, db in grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise ValueError("non-finite gradients")
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for layer, (dw, db), (mw, mb), (vw, vb) in zip(net.layers, grads, state.m, state.v):
        for param, g, m, v in ((layer.weights, dw, mw, vw), (layer.bias, db, mb, vb)):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * np.square(g)
            param -= state.alpha * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return state


def train(net: Network, inputs: np.ndarray, targets: np.ndarray, *, epochs: int = 10,
          batch_size: int = 128, loss_kind: str = "mse", seed: int = 0,
          learning_rate: float = ADAM_ALPHA) -> tuple[Network, list[float]]:
    """Mini-batch Adam training; returns the network and per-epoch mean loss.

    One seeded generator drives both the per-epoch shuffle and the dropout
    masks, so identical seeds give bit-identical trajectories.
    """
    x = np.asarray(inputs, dtype=net.dtype)
    y = np.asarray(targets, dtype=net.dtype)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("inputs/targets must be 2-D with equal row counts")
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")

    rng = np.random.default_rng(seed)
    state = AdamState.for_network(net, alpha=learning_rate)
    history: list[float] = []
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cache = forward(net, x[idx], training=True, rng=rng)
            value, grad = loss(loss_kind, cache.output, y[idx])
            adam_step(net, backward(net, cache, grad), state)
            total += value * len(idx)
        history.append(total / n)
    return net, history


def predict(net: Network, inputs: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass (dropout off)."""
    return forward(net, inputs, training=False).output


# ---------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}


def network_to_bytes(net: Network) -> bytes:
    parts = [CKPT_MAGIC,
             struct.pack("<IBB2xd", CKPT_VERSION, _DTYPE_CODES[np.dtype(net.dtype)],
                         len(net.layers), net.dropout_rate)]
    for layer in net.layers:
        parts.append(struct.pack("<IIB3x", layer.in_dim, layer.out_dim,
                                 _ACT_CODES[layer.activation]))
    for layer in net.layers:
        parts.append(layer.weights.tobytes(order="C"))
        parts.append(layer.bias.tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def network_from_bytes(raw: bytes) -> Network:
    if len(raw) < len(CKPT_MAGIC) + 16 + 32:
        raise CheckpointError("checkpoint too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    if body[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {body[:8]!r}")
    version, dtype_code, n_layers, dropout = struct.unpack("<IBB2xd", body[8:24])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    off = 24
    shapes = []
    for _ in range(n_layers):
        in_dim, out_dim, act_code = struct.unpack("<IIB3x", body[off:off + 12])
        if act_code not in _CODE_ACTS:
            raise CheckpointError(f"unknown activation code {act_code}")
        shapes.append((in_dim, out_dim, _CODE_ACTS[act_code]))
        off += 12
    layers = []
    for in_dim, out_dim, act in shapes:
        wsize = in_dim * out_dim * dtype.itemsize
        bsize = out_dim * dtype.itemsize
        if off + wsize + bsize > len(body):
            raise CheckpointError("truncated parameter block")
        w = np.frombuffer(body, dtype=dtype, count=in_dim * out_dim, offset=off
                          ).reshape(in_dim, out_dim).copy()
        off += wsize
        b = np.frombuffer(body, dtype=dtype, count=out_dim, offset=off).copy()
        off += bsize
        layers.append(DenseLayer(weights=w, bias=b, activation=act))
    if off != len(body):
        raise CheckpointError("trailing bytes after parameter blocks")
    return Network(layers=layers, dropout_rate=dropout)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
