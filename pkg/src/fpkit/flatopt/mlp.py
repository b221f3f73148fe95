"""A ReLU multilayer perceptron with hand-written backpropagation.

All parameters live in one flat float64 vector; per-layer weight matrices and
bias vectors are views into it. This keeps SAM perturbations and SWA
averaging plain vector arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput


def _layer_shapes(sizes):
    return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]


def n_params(sizes) -> int:
    return sum(a * b + b for a, b in _layer_shapes(sizes))


@dataclass
class MlpModel:
    sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise InvalidInput(f"bad layer sizes {self.sizes}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (n_params(self.sizes),):
            raise InvalidInput(
                f"expected {n_params(self.sizes)} parameters, got {self.params.shape}"
            )

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "MlpModel":
        """He-normal weights, zero biases."""
        chunks = []
        for fan_in, fan_out in _layer_shapes(sizes):
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return cls(tuple(sizes), np.concatenate(chunks))

    @classmethod
    def zeros(cls, sizes) -> "MlpModel":
        return cls(tuple(sizes), np.zeros(n_params(sizes)))

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views, W of shape (fan_in, fan_out), for ``params`` or the model's own."""
        p = self.params if params is None else params
        out, i = [], 0
        for fan_in, fan_out in _layer_shapes(self.sizes):
            w = p[i : i + fan_in * fan_out].reshape(fan_in, fan_out)
            i += fan_in * fan_out
            b = p[i : i + fan_out]
            i += fan_out
            out.append((w, b))
        return out

    def copy(self, params: np.ndarray | None = None) -> "MlpModel":
        return MlpModel(self.sizes, np.array(self.params if params is None else params))

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "weights": [w.tolist() for w, _ in self.layers()],
            "biases": [b.tolist() for _, b in self.layers()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        chunks = []
        for w, b in zip(d["weights"], d["biases"]):
            chunks.append(np.asarray(w, dtype=float).ravel())
            chunks.append(np.asarray(b, dtype=float))
        return cls(tuple(d["sizes"]), np.concatenate(chunks))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def forward(model: MlpModel, x: np.ndarray, params: np.ndarray | None = None):
    """Logits for a batch, plus the cache ``backward`` needs.

    The cache holds the input of every layer (post-activation) and the
    hidden pre-activations.
    """
    a = np.asarray(x, dtype=float)
    if a.ndim != 2 or a.shape[1] != model.sizes[0]:
        raise InvalidInput(f"expected input of shape (m, {model.sizes[0]}), got {a.shape}")
    layers = model.layers(params)
    inputs, pre = [], []
    for j, (w, b) in enumerate(layers):
        inputs.append(a)
        h = a @ w + b
        if j < len(layers) - 1:
            pre.append(h)
            a = np.maximum(h, 0.0)
        else:
            a = h
    return a, (inputs, pre)


def penultimate(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Activations feeding the output layer."""
    _, (inputs, _) = forward(model, x)
    return inputs[-1]


def backward(model: MlpModel, cache, dlogits: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
    """Flat gradient of a scalar loss given dL/dlogits."""
    inputs, pre = cache
    layers = model.layers(params)
    grads = [None] * len(layers)
    delta = dlogits
    for j in range(len(layers) - 1, -1, -1):
        w, _ = layers[j]
        grads[j] = (inputs[j].T @ delta, delta.sum(axis=0))
        if j > 0:
            delta = (delta @ w.T) * (pre[j - 1] > 0)
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
