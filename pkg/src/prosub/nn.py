"""Small dense MLP engine: forward/backward, dropout, He-normal init, Adam, L2 loss.

All arithmetic is float64. Parameters are held in C-contiguous arrays so the
compiled kernels can update them in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._ext import LINEAR, RELU, SCALED_SIGMOID2, kernels

ACTIVATIONS = {"linear": LINEAR, "relu": RELU, "scaled_sigmoid2": SCALED_SIGMOID2}
_ACT_NAMES = {v: k for k, v in ACTIVATIONS.items()}

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def he_normal_init(shape, rng):
    """Draw a ``(fan_in, fan_out)`` matrix from N(0, sqrt(2 / fan_in))."""
    fan_in, fan_out = shape
    if fan_in < 1 or fan_out < 1:
        raise ShapeError(f"invalid weight shape {shape}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not match"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def n_in(self):
        return self.weights.shape[0]

    @property
    def n_out(self):
        return self.weights.shape[1]


@dataclass
class Mlp:
    """A feed-forward stack of :class:`DenseLayer`.

    ``version`` is bumped whenever parameters change through :meth:`step`,
    which lets :func:`backward` reject a tape recorded before the update.
    """

    layers: list
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError(f"layer dims do not chain: {prev.n_out} -> {nxt.n_in}")

    @classmethod
    def build(cls, sizes, rng, hidden_activation="relu", output_activation="linear",
              dropout=0.0):
        """He-normal initialised MLP with layer widths ``sizes`` (input first).

        ``dropout`` applies to hidden layer outputs only.
        """
        if len(sizes) < 2:
            raise ShapeError("sizes must list at least an input and an output width")
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(
                DenseLayer(
                    he_normal_init((a, b), rng),
                    np.zeros(b),
                    output_activation if last else hidden_activation,
                    0.0 if last else dropout,
                )
            )
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    @property
    def sizes(self):
        return [self.n_in] + [layer.n_out for layer in self.layers]

    def parameters(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of live parameter arrays."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self):
        return Mlp(
            [
                DenseLayer(l.weights.copy(), l.bias.copy(), l.activation, l.dropout_rate)
                for l in self.layers
            ]
        )

    def step(self, grads, state):
        """Apply one Adam update in place and invalidate outstanding tapes."""
        adam_step(self.parameters(), grads, state)
        self.version += 1

    def __call__(self, batch):
        return forward(self, batch)[0]


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: list
    preacts: list
    outputs: list
    drop_masks: list


def forward(net, batch, train_mode=False, rng=None):
    """Run ``batch`` through ``net``; returns ``(output, tape)``.

    Dropout is applied to a layer's output only when ``train_mode`` is set,
    with inverted scaling so eval mode is a plain forward pass.
    """
    x = np.ascontiguousarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ShapeError(f"batch shape {x.shape} does not fit input width {net.n_in}")
    inputs, preacts, outputs, masks = [], [], [], []
    for layer in net.layers:
        inputs.append(x)
        z = x @ layer.weights
        a = np.empty_like(z)
        kernels.bias_activation(z, layer.bias, ACTIVATIONS[layer.activation], a)
        preacts.append(z)
        outputs.append(a)
        mask = None
        if train_mode and layer.dropout_rate > 0.0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = 1.0 - layer.dropout_rate
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
        masks.append(mask)
        x = a
    return x, Tape(id(net), net.version, inputs, preacts, outputs, masks)


def backward(net, tape, loss_grad):
    """Reverse pass. Returns ``(param_grads, input_grad)``.

    ``param_grads`` is parallel to :meth:`Mlp.parameters`.
    """
    if tape.net_id != id(net) or tape.version != net.version:
        raise StaleTapeError("tape was not recorded on this network's current parameters")
    g = np.ascontiguousarray(loss_grad, dtype=np.float64)
    if g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"loss gradient {g.shape} vs output {tape.outputs[-1].shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if tape.drop_masks[i] is not None:
            g = g * tape.drop_masks[i]
        dz = np.empty_like(g)
        kernels.activation_backward(
            tape.preacts[i], tape.outputs[i], g, ACTIVATIONS[layer.activation], dz
        )
        grads[2 * i] = tape.inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        g = np.ascontiguousarray(dz @ layer.weights.T)
    return grads, g


def l2_loss(prediction, target):
    """Mean squared elementwise difference."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    diff = prediction - target
    return float(np.mean(diff * diff))


def l2_loss_grad(prediction, target):
    diff = np.asarray(prediction, dtype=np.float64) - target
    return diff * (2.0 / diff.size)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in parameter slots {bad}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {np.shape(g)}")
        kernels.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            state.lr, state.beta1, state.beta2, state.eps, bc1, bc2,
        )
    return params, state


# checkpoint layout: <II format_version layer_count, then per layer
# <QQBd in out activation dropout, weights (in*out) and bias (out) as <f8
_HEADER = struct.Struct("<II")
_LAYER = struct.Struct("<QQBd")


def save_mlp(net, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_VERSION, len(net.layers)))
        for layer in net.layers:
            fh.write(_LAYER.pack(layer.n_in, layer.n_out, ACTIVATIONS[layer.activation],
                                 layer.dropout_rate))
            fh.write(layer.weights.astype("<f8").tobytes(order="C"))
            fh.write(layer.bias.astype("<f8").tobytes())


def load_mlp(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, count = _HEADER.unpack_from(data, 0)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size
    layers = []
    for _ in range(count):
        if len(data) < offset + _LAYER.size:
            raise ValueError(f"{path}: truncated layer header")
        n_in, n_out, tag, rate = _LAYER.unpack_from(data, offset)
        offset += _LAYER.size
        if tag not in _ACT_NAMES:
            raise ValueError(f"{path}: unknown activation tag {tag}")
        nbytes = 8 * (n_in * n_out + n_out)
        if len(data) < offset + nbytes:
            raise ValueError(f"{path}: truncated layer payload")
        w = np.frombuffer(data, "<f8", n_in * n_out, offset).reshape(n_in, n_out)
        offset += 8 * n_in * n_out
        b = np.frombuffer(data, "<f8", n_out, offset)
        offset += 8 * n_out
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), _ACT_NAMES[tag], rate))
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return Mlp(layers)
