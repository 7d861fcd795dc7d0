"""Per-pixel multilayer perceptron with exact analytic gradients.

The same MLP is applied independently to every pixel of an ``(..., F)``
feature grid and produces an ``(..., K)`` logit grid. Hidden layers use tanh,
the output layer is linear.

Parameter layout (the flat ``params`` vector): layers in order, and for each
layer the weight matrix of shape ``(fan_in, fan_out)`` in row-major order
followed by the bias of length ``fan_out``. Every vector that lives in
parameter space (control variates, accumulators) uses this layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError
from .losses import CrossEntropyObjective


def n_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _check_sizes(layer_sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise InvalidInputError(f"layer_sizes needs >= 2 positive entries, got {list(layer_sizes)}")
    return sizes


def unflatten(layer_sizes: Sequence[int], params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views (no copies)."""
    sizes = _check_sizes(layer_sizes)
    if params.shape != (n_params(sizes),):
        raise InvalidInputError(f"expected {n_params(sizes)} parameters, got shape {params.shape}")
    out = []
    pos = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers]).astype(np.float64)


@dataclass
class MlpModel:
    layer_sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.layer_sizes = _check_sizes(self.layer_sizes)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (n_params(self.layer_sizes),):
            raise InvalidInputError(
                f"params length {self.params.size} != {n_params(self.layer_sizes)} for {self.layer_sizes}")

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.layer_sizes, self.params)

    def with_params(self, params: np.ndarray) -> "MlpModel":
        return MlpModel(self.layer_sizes, np.array(params, dtype=np.float64))

    def copy(self) -> "MlpModel":
        return self.with_params(self.params)


def init_model(layer_sizes: Sequence[int], seed: int) -> MlpModel:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    sizes = _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((w, np.zeros(fan_out)))
    return MlpModel(sizes, flatten(layers))


def _as_pixels(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != model.n_features:
        raise InvalidInputError(
            f"input trailing dimension {x.shape[-1] if x.ndim else None} != model features {model.n_features}")
    return x.reshape(-1, model.n_features)


def _forward_pixels(model: MlpModel, pixels: np.ndarray) -> list[np.ndarray]:
    """Return the activations of every layer, input first, logits last."""
    acts = [pixels]
    layers = model.layers()
    for depth, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        acts.append(z if depth == len(layers) - 1 else np.tanh(z))
    return acts


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Logits for an ``(..., F)`` grid, shaped ``(..., K)``."""
    pixels = _as_pixels(model, x)
    return _forward_pixels(model, pixels)[-1].reshape(np.shape(x)[:-1] + (model.n_classes,))


def _backprop(model: MlpModel, acts: list[np.ndarray], dlogits: np.ndarray) -> np.ndarray:
    layers = model.layers()
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    delta = dlogits
    for depth in range(len(layers) - 1, -1, -1):
        w, _ = layers[depth]
        grads[depth] = (acts[depth].T @ delta, delta.sum(axis=0))
        if depth:
            delta = (delta @ w.T) * (1.0 - acts[depth] ** 2)
    return flatten(grads)


class BackwardResult(NamedTuple):
    loss: float
    grad: np.ndarray
    logits: np.ndarray
    kld: float | None


def value_and_grad(model: MlpModel, x: np.ndarray, mask: np.ndarray, objective=None) -> BackwardResult:
    """Loss, parameter gradient and logits for one sample.

    ``objective`` is any object with ``evaluate(logits, mask, params)``
    returning :class:`feddwa.losses.LossTerms`; cross-entropy by default.
    """
    objective = objective if objective is not None else CrossEntropyObjective()
    pixels = _as_pixels(model, x)
    grid_shape = np.shape(x)[:-1]
    if np.shape(mask) != grid_shape:
        raise InvalidInputError(f"mask shape {np.shape(mask)} does not match input grid {grid_shape}")
    acts = _forward_pixels(model, pixels)
    logits = acts[-1].reshape(grid_shape + (model.n_classes,))
    terms = objective.evaluate(logits, mask, model.params)
    grad = _backprop(model, acts, terms.dlogits.reshape(-1, model.n_classes))
    if terms.dparams is not None:
        grad = grad + terms.dparams
    return BackwardResult(terms.loss, grad, logits, terms.kld)


def backward(model: MlpModel, x: np.ndarray, mask: np.ndarray, objective=None) -> tuple[float, np.ndarray]:
    res = value_and_grad(model, x, mask, objective)
    return res.loss, res.grad


def _check_same_length(x: np.ndarray, y: np.ndarray) -> None:
    if np.shape(x) != np.shape(y):
        raise InvalidInputError(f"parameter vectors differ in shape: {np.shape(x)} vs {np.shape(y)}")


def param_axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``a * x + y`` for equal-length parameter vectors."""
    _check_same_length(x, y)
    return a * np.asarray(x, dtype=np.float64) + np.asarray(y, dtype=np.float64)


def param_norm_sq(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x @ x)
