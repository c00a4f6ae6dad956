"""Leaky-ReLU multilayer perceptron used as the deep feature extractor."""

from dataclasses import dataclass, field

import numpy as np

from isda_lab.errors import DomainError
from isda_lab.guardrails import as_float_array, require_finite, require_shape
from isda_lab.numeric import Rng

DEFAULT_SLOPE = 0.1


@dataclass
class Mlp:
    """
    Layers ``dims[0] -> dims[1] -> ... -> dims[-1]``; the last width is the feature
    dimension A. Leaky-ReLU follows every hidden layer, and the feature layer too
    unless ``activate_features`` is False.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = DEFAULT_SLOPE
    activate_features: bool = True
    dims: list[int] = field(init=False)

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise DomainError("Mlp needs one bias per weight matrix and at least one layer")
        self.weights = [as_float_array(w, "weight", ndim=2) for w in self.weights]
        self.biases = [as_float_array(b, "bias", ndim=1) for b in self.biases]
        dims = [self.weights[0].shape[1]]
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != dims[-1] or b.shape[0] != W.shape[0]:
                raise DomainError(f"layer shapes do not chain: {W.shape} after width {dims[-1]}")
            dims.append(W.shape[0])
        self.dims = dims

    @classmethod
    def initialize(
        cls,
        dims: list[int],
        rng: Rng,
        *,
        slope: float = DEFAULT_SLOPE,
        activate_features: bool = True,
    ) -> "Mlp":
        """He-style normal init scaled for leaky-ReLU, zero biases."""
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DomainError(f"dims must list at least input and feature width, got {dims}")
        gain = np.sqrt(2.0 / (1.0 + slope**2))
        weights = [
            gain / np.sqrt(d_in) * rng.standard_normal((d_out, d_in))
            for d_in, d_out in zip(dims[:-1], dims[1:])
        ]
        biases = [np.zeros(d_out) for d_out in dims[1:]]
        return cls(weights, biases, slope=slope, activate_features=activate_features)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    def _activated(self, layer: int) -> bool:
        return layer < len(self.weights) - 1 or self.activate_features

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (live references)."""
        params: dict[str, np.ndarray] = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layer{i}.weight"] = W
            params[f"layer{i}.bias"] = b
        return params

    def copy(self) -> "Mlp":
        return Mlp(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            slope=self.slope,
            activate_features=self.activate_features,
        )


@dataclass(frozen=True)
class ForwardCache:
    """Layer inputs and pre-activations kept for the backward pass."""

    inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]


def forward(model: Mlp, inputs: object) -> tuple[np.ndarray, ForwardCache]:
    """Features for a batch of inputs plus the cache ``backward`` needs."""
    X = as_float_array(inputs, "inputs", ndim=2)
    require_shape(X, (None, model.input_dim), "inputs")
    require_finite(X, "inputs")
    layer_inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    h = X
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        layer_inputs.append(h)
        z = h @ W.T + b
        pre.append(z)
        h = np.where(z > 0, z, model.slope * z) if model._activated(i) else z
    return h, ForwardCache(tuple(layer_inputs), tuple(pre))


def backward(
    model: Mlp, cache: ForwardCache, grad_features: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """
    Backpropagate d(loss)/d(features).

    Returns:
        (parameter gradients keyed like ``Mlp.parameters``, gradient w.r.t. inputs)
    """
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(grad_features, dtype=np.float64)
    for i in reversed(range(len(model.weights))):
        z = cache.pre_activations[i]
        if model._activated(i):
            g = g * np.where(z > 0, 1.0, model.slope)
        grads[f"layer{i}.weight"] = g.T @ cache.inputs[i]
        grads[f"layer{i}.bias"] = g.sum(axis=0)
        g = g @ model.weights[i]
    return grads, g
