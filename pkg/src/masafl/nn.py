"""Minimal dense network engine used by clients and by the unlearning probe.

A model is a stack of fully connected layers: ReLU on every hidden layer,
raw logits at the output. All parameters live in float64 and every model
has an exact flat-vector form (`flatten` / `unflatten`) so aggregation
rules can treat updates as plain vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

Array = np.ndarray


@dataclass
class ModelState:
    """Weights and biases of a feed-forward classifier.

    ``layers[i]`` holds ``(weight, bias)`` with shapes ``(out, in)`` and
    ``(out,)``. Hidden layers apply ReLU; the last layer emits logits.
    """

    layers: list[tuple[Array, Array]]

    @property
    def shape_signature(self) -> tuple[int, ...]:
        dims = [self.layers[0][0].shape[1]]
        dims.extend(w.shape[0] for w, _ in self.layers)
        return tuple(dims)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "ModelState":
        return ModelState([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class OptimizerState:
    """SGD-with-momentum state for one model."""

    learning_rate: float
    momentum: float = 0.0
    momentum_buffer: Array | None = None

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def init_model(layer_sizes: tuple[int, ...], seed: int = 0) -> ModelState:
    """He-initialized model for the given layer size chain."""
    if len(layer_sizes) < 2:
        raise ConfigError(f"need at least input and output sizes, got {layer_sizes}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 6]))
    layers = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return ModelState(layers)


def _as_matrix(batch, input_dim: int) -> Array:
    """Coerce a batch (Dataset, example sequence, or array) to (n, input_dim)."""
    if hasattr(batch, "pixels"):  # Dataset or single LabeledExample
        x = np.asarray(batch.pixels, dtype=np.float64)
    elif isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "pixels"):
        x = np.stack([np.asarray(ex.pixels, dtype=np.float64) for ex in batch])
    else:
        x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != input_dim:
        raise ConfigError(
            f"batch has {x.shape[1]} features per example, model expects {input_dim}"
        )
    return x


def _batch_labels(batch, labels) -> Array:
    if labels is None:
        if hasattr(batch, "labels"):
            labels = batch.labels
        elif isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "label"):
            labels = [ex.label for ex in batch]
        else:
            raise ValueError("labels are required when the batch does not carry them")
    return np.asarray(labels, dtype=np.int64)


def forward(model: ModelState, batch) -> Array:
    """Logits for a batch; accepts a Dataset, example sequence, or array."""
    x = _as_matrix(batch, model.input_dim)
    for w, b in model.layers[:-1]:
        x = np.maximum(x @ w.T + b, 0.0)
    w, b = model.layers[-1]
    return x @ w.T + b


def softmax(logits: Array) -> Array:
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Array, labels) -> float:
    """Mean negative log-likelihood of the true labels."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy needs a nonempty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(
            f"labels must lie in [0, {logits.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(len(labels)), labels]
    return float(nll.mean())


def backward(model: ModelState, batch, labels=None) -> Array:
    """Flat gradient of mean cross-entropy w.r.t. every parameter.

    Coordinate order matches `flatten`.
    """
    x = _as_matrix(batch, model.input_dim)
    y = _batch_labels(batch, labels)
    n = x.shape[0]
    if n == 0:
        raise ValueError("backward needs a nonempty batch")

    activations = [x]
    for w, b in model.layers[:-1]:
        x = np.maximum(x @ w.T + b, 0.0)
        activations.append(x)
    w, b = model.layers[-1]
    logits = x @ w.T + b

    probs = softmax(logits)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[tuple[Array, Array]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[i]
        a_prev = activations[i]
        grads.append((delta.T @ a_prev, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w) * (a_prev > 0.0)
    grads.reverse()
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def sgd_step(model: ModelState, grad: Array, opt: OptimizerState, ascend: bool = False) -> None:
    """One momentum-SGD step in place; `ascend` flips the update sign."""
    d = param_count(model.shape_signature)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (d,):
        raise ConfigError(f"gradient has length {grad.shape}, model has {d} parameters")
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains non-finite entries")
    if opt.momentum_buffer is None:
        opt.momentum_buffer = np.zeros(d)
    opt.momentum_buffer = opt.momentum * opt.momentum_buffer + grad
    step = opt.learning_rate * opt.momentum_buffer
    theta = flatten(model)
    theta = theta + step if ascend else theta - step
    offset = 0
    for i, (w, b) in enumerate(model.layers):
        w_new = theta[offset : offset + w.size].reshape(w.shape)
        offset += w.size
        b_new = theta[offset : offset + b.size]
        offset += b.size
        model.layers[i] = (w_new, b_new)


def flatten(model: ModelState) -> Array:
    """Model parameters as one float64 vector (weights then bias, per layer)."""
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in model.layers])


def unflatten(vector: Array, shape_signature: tuple[int, ...]) -> ModelState:
    """Inverse of `flatten` for the given layer size chain."""
    vector = np.asarray(vector, dtype=np.float64)
    expected = param_count(shape_signature)
    if vector.shape != (expected,):
        raise ConfigError(
            f"vector has shape {vector.shape}, signature {shape_signature} "
            f"needs {expected} entries"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in zip(shape_signature[:-1], shape_signature[1:]):
        w = vector[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in).copy()
        offset += fan_in * fan_out
        b = vector[offset : offset + fan_out].copy()
        offset += fan_out
        layers.append((w, b))
    return ModelState(layers)


def param_count(shape_signature: tuple[int, ...]) -> int:
    return sum(
        fan_in * fan_out + fan_out
        for fan_in, fan_out in zip(shape_signature[:-1], shape_signature[1:])
    )


def vec_add(a: Array, b: Array) -> Array:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"vector shapes differ: {a.shape} vs {b.shape}")
    return a + b


def vec_scale(a: Array, k: float) -> Array:
    return np.asarray(a, dtype=np.float64) * float(k)


def l2_norm(a: Array) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def vec_mean(vectors) -> Array:
    """Coordinate-wise mean, (1/n) * sum."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("vec_mean needs at least one vector")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    return stacked.sum(axis=0) / len(vectors)
