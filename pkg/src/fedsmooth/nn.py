"""Dense ReLU network with softmax output and exact backpropagation.

Parameters live in one flat float64 vector. For each layer the weight
matrix of shape ``(fan_in, fan_out)`` comes first (row-major), followed by
its ``fan_out`` biases; layers are stored in order. A layer computes
``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedsmooth.errors import FormatError, NumericError, ShapeError

CHECKPOINT_HEADER = "fedsmooth-params v1"


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("need at least 2 classes")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes())

    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def __str__(self):
        return ",".join(str(s) for s in self.layer_sizes)

    @classmethod
    def parse(cls, text: str) -> "NetworkSpec":
        return cls(tuple(int(t) for t in text.strip().split(",")))


@dataclass(frozen=True, eq=False)
class Params:
    """Flat parameter vector bound to the architecture it instantiates."""

    spec: NetworkSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.spec.num_params:
            raise ShapeError(
                f"expected {self.spec.num_params} parameters for {self.spec}, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat vector, one pair per layer."""
        out = []
        offset = 0
        for fan_in, fan_out in self.spec.shapes():
            w = self.values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset:offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def with_values(self, values: np.ndarray) -> "Params":
        return Params(self.spec, values)

    def copy(self) -> "Params":
        return Params(self.spec, self.values.copy())


def init_params(spec: NetworkSpec, seed: int) -> Params:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.shapes():
        chunks.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return Params(spec, np.concatenate(chunks))


def zeros(spec: NetworkSpec) -> Params:
    return Params(spec, np.zeros(spec.num_params))


def _as_rows(params: Params, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeError(f"expected inputs with {params.spec.input_dim} columns, got shape {np.shape(inputs)}")
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward_cache(params: Params, x: np.ndarray):
    """Returns the layer list, the inputs to each layer and the final logits."""
    layers = params.layers()
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite pre-activation", layer=i)
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return layers, acts, h


def _backprop_input(layers, acts, dlogits: np.ndarray) -> np.ndarray:
    g = dlogits
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        g = g @ w.T
        if i > 0:
            g = g * (acts[i] > 0)
    return g


def logits(params: Params, inputs) -> np.ndarray:
    return _forward_cache(params, _as_rows(params, inputs))[2]


def forward(params: Params, inputs) -> np.ndarray:
    """Class probabilities, one row per input row."""
    return _softmax(logits(params, inputs))


def predict_classes(params: Params, inputs) -> np.ndarray:
    # argmax of logits equals argmax of probabilities; lowest index wins ties
    return np.argmax(logits(params, inputs), axis=1)


def loss_and_param_grad(params: Params, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat parameters."""
    x = _as_rows(params, inputs)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0] or y.size == 0:
        raise ShapeError(f"{x.shape[0]} input rows but {y.size} labels")
    if y.min() < 0 or y.max() >= params.spec.num_classes:
        raise ShapeError("label out of range")

    layers, acts, z = _forward_cache(params, x)
    logp = _log_softmax(z)
    rows = np.arange(y.size)
    loss = -logp[rows, y].mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=len(layers) - 1)

    g = np.exp(logp)
    g[rows, y] -= 1.0
    g /= y.size

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = ((acts[i].T @ g).ravel(), g.sum(axis=0))
        if i > 0:
            g = (g @ w.T) * (acts[i] > 0)
    flat = np.concatenate([part for pair in grads for part in pair])
    return float(loss), flat


def input_grad(params: Params, x, cls: int) -> np.ndarray:
    """Gradient of the probability of ``cls`` w.r.t. a single input vector."""
    return prob_input_grads(params, np.asarray(x, dtype=np.float64)[None, :], cls)[0]


def prob_input_grads(params: Params, inputs, cls) -> np.ndarray:
    """Row-wise gradients of ``p_cls(x_i)`` w.r.t. each input row.

    ``cls`` may be a scalar or one class per row.
    """
    x = _as_rows(params, inputs)
    layers, acts, z = _forward_cache(params, x)
    p = _softmax(z)
    cls = _class_index(params, cls, x.shape[0])
    rows = np.arange(x.shape[0])
    py = p[rows, cls]
    d = -p * py[:, None]
    d[rows, cls] += py
    return _backprop_input(layers, acts, d)


def log_prob_and_input_grads(params: Params, inputs, cls) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``log p_cls(x_i)`` and its gradient w.r.t. each input row."""
    x = _as_rows(params, inputs)
    layers, acts, z = _forward_cache(params, x)
    logp = _log_softmax(z)
    cls = _class_index(params, cls, x.shape[0])
    rows = np.arange(x.shape[0])
    d = -np.exp(logp)
    d[rows, cls] += 1.0
    return logp[rows, cls], _backprop_input(layers, acts, d)


def _class_index(params, cls, n):
    cls = np.broadcast_to(np.asarray(cls, dtype=np.int64), (n,))
    if cls.min() < 0 or cls.max() >= params.spec.num_classes:
        raise ShapeError(f"class index out of range for {params.spec.num_classes} classes")
    return cls


def sgd_step(params: Params, grad: np.ndarray, lr: float) -> Params:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameters {params.values.shape}")
    return params.with_values(params.values - lr * grad)


def save_params(params: Params, path) -> None:
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_HEADER}\n{params.spec}\n".encode("ascii"))
        f.write(params.values.astype("<f8").tobytes())


def load_params(path) -> Params:
    data = Path(path).read_bytes()
    try:
        header, spec_line, payload = data.split(b"\n", 2)
    except ValueError:
        raise FormatError(f"{path}: missing checkpoint header") from None
    if header.decode("ascii", "replace") != CHECKPOINT_HEADER:
        raise FormatError(f"{path}: expected header {CHECKPOINT_HEADER!r}, got {header[:40]!r}")
    spec = NetworkSpec.parse(spec_line.decode("ascii"))
    if len(payload) != 8 * spec.num_params:
        raise FormatError(f"{path}: expected {8 * spec.num_params} parameter bytes, got {len(payload)}")
    return Params(spec, np.frombuffer(payload, dtype="<f8").astype(np.float64))
