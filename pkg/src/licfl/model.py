"""A minimal dense network with exact backpropagation, and local client training.

Parameters travel as a :class:`ParamVector`: one flat float64 array plus the
per-layer shapes needed to slice it. The flat layout is layer-major, and
within a layer the weight matrix (``out x in``, row-major) comes before the
bias, so a one-layer net with ``W = [[1, 2]]`` and ``b = [3]`` flattens to
``(1, 2, 3)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LayerShape = tuple[int, int, int]  # (rows=out, cols=in, bias length)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 96
    hidden: tuple[int, ...] = (32, 16)
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all layer sizes must be >= 1: {self}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def shapes(self) -> list[LayerShape]:
        dims = self.layer_dims
        return [(dims[i + 1], dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def _size(shapes) -> int:
    return sum(r * c + b for r, c, b in shapes)


@dataclass
class ParamVector:
    values: np.ndarray
    shapes: list[LayerShape] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shapes = [tuple(int(d) for d in s) for s in self.shapes]
        if self.values.ndim != 1 or self.values.size != _size(self.shapes):
            raise ValueError(
                f"parameter vector of length {self.values.size} does not match "
                f"layer shapes {self.shapes} ({_size(self.shapes)} values)"
            )

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), list(self.shapes))

    def with_values(self, values) -> ParamVector:
        return ParamVector(np.asarray(values, dtype=np.float64), list(self.shapes))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views per layer; writes go through to ``values``."""
        out = []
        offset = 0
        for rows, cols, blen in self.shapes:
            w = self.values[offset : offset + rows * cols].reshape(rows, cols)
            offset += rows * cols
            b = self.values[offset : offset + blen]
            offset += blen
            out.append((w, b))
        return out


def flatten(p: ParamVector) -> np.ndarray:
    return p.values.copy()


def unflatten(v, shapes) -> ParamVector:
    return ParamVector(np.array(v, dtype=np.float64, copy=True), list(shapes))


def from_layers(layers) -> ParamVector:
    """Build a ParamVector from a list of ``(W, b)`` pairs."""
    shapes, chunks = [], []
    for w, b in layers:
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        shapes.append((w.shape[0], w.shape[1], b.size))
        chunks += [w.ravel(), b]
    return ParamVector(np.concatenate(chunks), shapes)


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(_size(spec.shapes))
    p = ParamVector(values, spec.shapes)
    for w, _ in p.layers():
        fan_out, fan_in = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return p


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(x, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(1, -1) if x.ndim == 1 else x.reshape(x.shape[0], -1)
    if x.shape[1] != input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {input_dim}")
    return x


def _forward(p: ParamVector, x: np.ndarray):
    acts = [x]
    pre = []
    layers = p.layers()
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        pre.append(z)
        h = _sigmoid(z) if i == len(layers) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def predict(p: ParamVector, x, chunk: int = 4096) -> np.ndarray:
    """Sigmoid outputs for a batch of inputs, shape ``(n,)`` for one output unit."""
    input_dim = p.shapes[0][1]
    n = len(x)
    out = []
    for start in range(0, n, chunk):
        xb = _as_batch(x[start : start + chunk], input_dim)
        out.append(_forward(p, xb)[1][-1])
    y = np.concatenate(out) if out else np.empty((0, p.shapes[-1][0]))
    return y[:, 0] if y.shape[1] == 1 else y


def forward(p: ParamVector, x) -> np.ndarray | float:
    """Prediction for a single input vector (a float for one output unit)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes one input vector; use predict for batches")
    y = _forward(p, _as_batch(x, p.shapes[0][1]))[1][-1][0]
    return float(y[0]) if y.size == 1 else y


def loss_and_grad(p: ParamVector, x, y) -> tuple[float, ParamVector]:
    """Mean squared error of the sigmoid output and its exact gradient."""
    xb = _as_batch(x, p.shapes[0][1])
    n = xb.shape[0]
    if n == 0:
        raise ValueError("loss_and_grad needs a non-empty batch")
    yb = np.asarray(y, dtype=np.float64).reshape(n, -1)

    pre, acts = _forward(p, xb)
    out = acts[-1]
    err = out - yb
    loss = float(np.mean(err**2))

    grad = ParamVector(np.zeros_like(p.values), p.shapes)
    glayers = grad.layers()
    layers = p.layers()
    delta = (2.0 / err.size) * err * out * (1.0 - out)
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = glayers[i]
        gw[...] = delta.T @ acts[i]
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0]) * (pre[i - 1] > 0)
    return loss, grad


def loss(p: ParamVector, x, y, chunk: int = 4096) -> float:
    pred = predict(p, x, chunk=chunk)
    return float(np.mean((pred - np.asarray(y, dtype=np.float64).reshape(pred.shape)) ** 2))


def client_update(
    p: ParamVector,
    x,
    y,
    lr: float,
    epochs: int = 1,
    batch_size: int = 32,
    seed: int = 0,
) -> ParamVector:
    """Local mini-batch SGD on one client's data, starting from a copy of ``p``.

    Each epoch visits the samples in a fresh permutation drawn from a
    generator seeded with ``seed``.
    """
    n = len(y)
    if n == 0:
        raise ValueError("client dataset is empty")
    if lr < 0 or epochs < 1 or batch_size < 1:
        raise ValueError(f"invalid training settings lr={lr}, epochs={epochs}, batch_size={batch_size}")
    y = np.asarray(y, dtype=np.float64)
    theta = p.copy()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start : start + batch_size])
            _, g = loss_and_grad(theta, x[idx], y[idx])
            theta.values -= lr * g.values
    return theta


def save_params(p: ParamVector, path) -> None:
    """Header line with the JSON layer-shape list, then little-endian float64 values."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write((json.dumps([list(s) for s in p.shapes]) + "\n").encode("ascii"))
        fh.write(p.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with Path(path).open("rb") as fh:
        shapes = [tuple(s) for s in json.loads(fh.readline().decode("ascii"))]
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return ParamVector(values, shapes)
