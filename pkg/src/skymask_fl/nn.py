"""Small fully connected network over flat float64 parameter vectors.

A model is a :class:`LayerLayout` plus a 1-D ``numpy`` array holding every
weight and bias. Each layer occupies a contiguous block of the vector: the
``(in, out)`` weight matrix in row-major order followed by the ``out`` bias.
Hidden layers use ReLU, the last layer produces logits for a softmax
cross-entropy loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import log_softmax, softmax

from .exceptions import ConfigurationError, NumericError, UsageError


@dataclass(frozen=True)
class LayerLayout:
    """Widths ``(D, h1, ..., C)`` of an MLP and the flat-vector offsets."""

    widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigurationError(f"invalid layer widths {self.widths!r}")
        object.__setattr__(self, "widths", widths)

    @property
    def layers(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        """Start offset of every layer block, plus the total as last entry."""
        out = [0]
        for fan_in, fan_out in self.layers:
            out.append(out[-1] + fan_in * fan_out + fan_out)
        return tuple(out)

    @property
    def total(self) -> int:
        return self.offsets[-1]

    @property
    def n_features(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def layer_names(self) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"fc{i + 1}.weight", f"fc{i + 1}.bias"]
        return names

    def layer_slices(self) -> list[tuple[str, slice]]:
        """Named slices for every weight and bias block, in vector order."""
        out = []
        for i, (fan_in, fan_out) in enumerate(self.layers):
            start = self.offsets[i]
            mid = start + fan_in * fan_out
            out.append((f"fc{i + 1}.weight", slice(start, mid)))
            out.append((f"fc{i + 1}.bias", slice(mid, mid + fan_out)))
        return out

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` per layer into ``params``."""
        params = check_params(params, self)
        out = []
        for i, (fan_in, fan_out) in enumerate(self.layers):
            start = self.offsets[i]
            mid = start + fan_in * fan_out
            out.append(
                (
                    params[start:mid].reshape(fan_in, fan_out),
                    params[mid : mid + fan_out],
                )
            )
        return out


def check_params(params, layout: LayerLayout) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != layout.total:
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, layout expects ({layout.total},)"
        )
    return params


def _check_batch(X, y, layout: LayerLayout):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layout.n_features:
        raise ConfigurationError(
            f"features have shape {X.shape}, expected (batch, {layout.n_features})"
        )
    if X.shape[0] < 1:
        raise UsageError("batch must contain at least one sample")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ConfigurationError(f"labels have shape {y.shape}, expected ({X.shape[0]},)")
        if y.size and (y.min() < 0 or y.max() >= layout.n_classes):
            raise UsageError(f"labels must lie in [0, {layout.n_classes})")
        y = y.astype(np.intp)
    return X, y


def init_params(layout: LayerLayout, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    blocks = []
    for fan_in, fan_out in layout.layers:
        bound = 1.0 / np.sqrt(fan_in)
        blocks.append(rng.uniform(-bound, bound, size=fan_in * fan_out + fan_out))
    return np.concatenate(blocks)


def _forward_cached(params, layout, X):
    acts = [X]
    h = X
    layers = layout.unpack(params)
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activations in layer {i}", layer=i)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return acts, layers


def forward(params, layout: LayerLayout, X) -> np.ndarray:
    """Logits of shape ``(batch, C)``."""
    params = check_params(params, layout)
    X, _ = _check_batch(X, None, layout)
    acts, _ = _forward_cached(params, layout, X)
    return acts[-1]


def predict(params, layout: LayerLayout, X) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(params, layout, X), axis=1)


def loss_and_grad(params, layout: LayerLayout, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    params = check_params(params, layout)
    X, y = _check_batch(X, y, layout)
    acts, layers = _forward_cached(params, layout, X)
    logits = acts[-1]
    n = X.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), y]))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=len(layers) - 1)

    delta = softmax(logits, axis=1)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grad = np.empty_like(params)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        fan_in, fan_out = W.shape
        start = layout.offsets[i]
        mid = start + fan_in * fan_out
        grad[start:mid] = (acts[i].T @ delta).ravel()
        grad[mid : mid + fan_out] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W.T) * (acts[i] > 0)
    if not np.all(np.isfinite(grad)):
        bad = next(
            i
            for i in range(len(layers))
            if not np.all(np.isfinite(grad[layout.offsets[i] : layout.offsets[i + 1]]))
        )
        raise NumericError(f"non-finite gradient in layer {bad}", layer=bad)
    return loss, grad


def sgd_step(params, grad, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ConfigurationError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    return params - lr * grad


def evaluate(params, layout: LayerLayout, X, y) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(params, layout, X) == np.asarray(y)))
