"""Seq2Point / Seq2Seq networks, Adam and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T

logger = logging.getLogger(__name__)

MIDPOINT = "midpoint-scalar"
FULL_WINDOW = "full-window"
OUTPUT_MODES = (MIDPOINT, FULL_WINDOW)

CHECKPOINT_VERSION = 1

DEFAULT_FILTERS = (30, 30, 40, 50, 50)
DEFAULT_KERNELS = (10, 8, 6, 5, 5)
DEFAULT_HIDDEN = 1024
DEFAULT_WINDOW = 99


class TrainingError(RuntimeError):
    pass


class Conv1D:
    kind = "conv1d"

    def __init__(self, kernels: np.ndarray, bias: np.ndarray):
        self.kernels = np.asarray(kernels, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.kernels, self.bias]

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        c, length = shape
        n_out, c_in, k = self.kernels.shape
        if c != c_in:
            raise T.ShapeError(f"conv1d expects {c_in} input channels, previous layer gives {c}")
        if length < k:
            raise T.ShapeError(f"conv1d kernel {k} longer than incoming length {length}")
        return (n_out, length - k + 1)

    def forward(self, x):
        return T.conv1d_forward(x, self.kernels, self.bias), x

    def backward(self, grad, cache):
        gx, gk, gb = T.conv1d_backward(grad, cache, self.kernels)
        return gx, [gk, gb]

    def describe(self) -> dict:
        o, c, k = self.kernels.shape
        return {"type": self.kind, "channels_in": c, "channels_out": o, "kernel_size": k}


class Dense:
    kind = "dense"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weights.shape[1]:
            raise T.ShapeError(
                f"dense expects a flat input of {self.weights.shape[1]}, previous layer gives {shape}"
            )
        return (self.weights.shape[0],)

    def forward(self, x):
        return T.dense_forward(x, self.weights, self.bias), x

    def backward(self, grad, cache):
        gx, gw, gb = T.dense_backward(grad, cache, self.weights)
        return gx, [gw, gb]

    def describe(self) -> dict:
        m, n = self.weights.shape
        return {"type": self.kind, "inputs": n, "outputs": m}


class ReLU:
    kind = "relu"
    params: list = []

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        return T.relu(x), x

    def backward(self, grad, cache):
        return T.relu_backward(grad, cache), []

    def describe(self) -> dict:
        return {"type": self.kind}


class Flatten:
    kind = "flatten"
    params: list = []

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), []

    def describe(self) -> dict:
        return {"type": self.kind}


class Network:
    """A feed-forward stack of conv1d / relu / flatten / dense layers.

    Inputs are windows of ``input_len`` samples, either a single window
    ``(L,)`` or a batch ``(B, L)``. When the first layer is a convolution the
    window is fed as a single channel.
    """

    def __init__(self, layers: Sequence, input_len: int, output_mode: str):
        if output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}, got {output_mode!r}")
        self.layers = list(layers)
        self.input_len = int(input_len)
        self.output_mode = output_mode
        self.norm_stats: dict[str, tuple[float, float]] = {}

        shape = self._input_shape()
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except T.ShapeError as exc:
                raise T.ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if len(shape) != 1:
            raise T.ShapeError(f"network must end in a flat output, got shape {shape}")
        expected = 1 if output_mode == MIDPOINT else self.input_len
        if shape[0] != expected:
            raise T.ShapeError(
                f"{output_mode} output must have extent {expected}, layers produce {shape[0]}"
            )
        self.output_len = shape[0]

    def _input_shape(self):
        if self.layers and isinstance(self.layers[0], Conv1D):
            return (1, self.input_len)
        return (self.input_len,)

    def _prepare(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.input_len:
            raise T.ShapeError(
                f"input windows must have length {self.input_len}, got shape {x.shape}"
            )
        if self.layers and isinstance(self.layers[0], Conv1D):
            x = x[:, None, :]
        return x, batched

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def forward(self, x) -> np.ndarray:
        out, batched = self._prepare(x)
        for layer in self.layers:
            out, _ = layer.forward(out)
        return out if batched else out[0]

    def _forward_cached(self, x):
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def _backward(self, grad, caches):
        param_grads: list[np.ndarray] = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, pg = layer.backward(grad, cache)
            param_grads[:0] = pg
        return grad, param_grads

    def loss_and_grads(self, x, y) -> tuple[float, list[np.ndarray]]:
        """Batch-mean MSE and its gradient w.r.t. every parameter."""
        xb, _ = self._prepare(x)
        y = np.asarray(y, dtype=np.float64).reshape(xb.shape[0], self.output_len)
        pred, caches = self._forward_cached(xb)
        loss, grad = T.mse_loss(pred, y)
        _, grads = self._backward(grad, caches)
        return loss, grads

    def input_gradient(self, x, y) -> np.ndarray:
        """Gradient of each window's own MSE loss w.r.t. that window's input."""
        xb, batched = self._prepare(x)
        y = np.asarray(y, dtype=np.float64)
        try:
            y = y.reshape(xb.shape[0], self.output_len)
        except ValueError:
            raise T.ShapeError(
                f"targets of shape {y.shape} do not match {xb.shape[0]} windows "
                f"of output length {self.output_len}"
            ) from None
        pred, caches = self._forward_cached(xb)
        grad = (2.0 / self.output_len) * (pred - y)
        gx, _ = self._backward(grad, caches)
        gx = gx.reshape(xb.shape[0], self.input_len)
        return gx if batched else gx[0]

    def layer_table(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "input_len": self.input_len,
            "output_mode": self.output_mode,
            "layers": self.layer_table(),
            "norm_stats": self.norm_stats,
        }
        arrays = {f"p{i}": p for i, p in enumerate(self.params)}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "Network":
        with np.load(path) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            arrays = [data[f"p{i}"] for i in range(len(data.files) - 1)]
        layers = []
        it = iter(arrays)
        for desc in meta["layers"]:
            kind = desc["type"]
            if kind == "conv1d":
                layers.append(Conv1D(next(it), next(it)))
            elif kind == "dense":
                layers.append(Dense(next(it), next(it)))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer type {kind!r} in checkpoint")
        net = cls(layers, meta["input_len"], meta["output_mode"])
        net.norm_stats = {k: tuple(v) for k, v in meta["norm_stats"].items()}
        return net


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _build(window_len, output_len, output_mode, filters, kernel_sizes, hidden, seed) -> Network:
    if len(filters) != len(kernel_sizes):
        raise ValueError("filters and kernel_sizes must have equal length")
    rng = np.random.default_rng(seed)
    layers: list = []
    channels, length = 1, window_len
    for n_out, k in zip(filters, kernel_sizes):
        if length < k:
            raise T.ShapeError(
                f"window_len {window_len} too short for kernel sizes {tuple(kernel_sizes)}"
            )
        w = _glorot(rng, (n_out, channels, k), channels * k, n_out * k)
        layers += [Conv1D(w, np.zeros(n_out)), ReLU()]
        channels, length = n_out, length - k + 1
    layers.append(Flatten())
    flat = channels * length
    layers += [
        Dense(_glorot(rng, (hidden, flat), flat, hidden), np.zeros(hidden)),
        ReLU(),
        Dense(_glorot(rng, (output_len, hidden), hidden, output_len), np.zeros(output_len)),
    ]
    return Network(layers, window_len, output_mode)


def build_seq2point(
    window_len: int = DEFAULT_WINDOW,
    filters: Sequence[int] = DEFAULT_FILTERS,
    kernel_sizes: Sequence[int] = DEFAULT_KERNELS,
    hidden: int = DEFAULT_HIDDEN,
    seed: int = 0,
) -> Network:
    """Conv stack + dense head predicting the appliance power at the window midpoint."""
    if window_len < 15 or window_len % 2 == 0:
        raise ValueError(f"seq2point window_len must be odd and >= 15, got {window_len}")
    return _build(window_len, 1, MIDPOINT, filters, kernel_sizes, hidden, seed)


def build_seq2seq(
    window_len: int = DEFAULT_WINDOW,
    filters: Sequence[int] = DEFAULT_FILTERS,
    kernel_sizes: Sequence[int] = DEFAULT_KERNELS,
    hidden: int = DEFAULT_HIDDEN,
    seed: int = 0,
) -> Network:
    """Same conv stack as :func:`build_seq2point`, dense head emitting the whole window."""
    if window_len < 15:
        raise ValueError(f"seq2seq window_len must be >= 15, got {window_len}")
    return _build(window_len, window_len, FULL_WINDOW, filters, kernel_sizes, hidden, seed)


BUILDERS = {"seq2point": build_seq2point, "seq2seq": build_seq2seq}


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have equal length")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    net: Network
    losses: list[float] = field(default_factory=list)


def train(net: Network, dataset, config: TrainConfig) -> TrainResult:
    """Mini-batch Adam on MSE. Shuffling is seeded from ``config.seed``.

    ``dataset`` is a windowed dataset or an ``(inputs, targets)`` pair.
    """
    if hasattr(dataset, "inputs"):
        inputs, targets = dataset.inputs, dataset.targets
    else:
        inputs, targets = dataset
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(targets) != n:
        raise ValueError(f"{n} inputs but {len(targets)} targets")
    targets = targets.reshape(n, net.output_len)

    rng = np.random.default_rng(config.seed)
    params = net.params
    state = AdamState.for_params(params)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = net.loss_and_grads(inputs[idx], targets[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            adam_step(state, params, grads, config.learning_rate)
            total += loss * len(idx)
        losses.append(total / n)
        logger.debug("epoch %d loss %.6g", epoch, losses[-1])
    return TrainResult(net, losses)
