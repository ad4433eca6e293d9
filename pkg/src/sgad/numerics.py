"""
Small dense neural-network engine: fully connected layers, backprop and Adam.

All arrays are float64 numpy arrays. A batch is a 2-D array of shape
(n_samples, n_features); weights are stored as (in_dim, out_dim) so that a
layer computes ``act(X @ W + b)``.

    Forward:   H_k = act_k(H_{k-1} @ W_k + b_k)
    Backward:  dA = dH_k * act_k'(A_k)
               dW_k = H_{k-1}^T @ dA,  db_k = sum(dA, axis=0)
               dH_{k-1} = dA @ W_k^T
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInputError

ACTIVATIONS = ("relu", "linear")


def as_matrix(batch, name="batch"):
    """Coerce ``batch`` to a finite float64 2-D array."""
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise RejectedInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RejectedInputError(f"{name} contains non-finite values")
    return arr


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise RejectedInputError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape[0] != self.weights.shape[1]:
            raise RejectedInputError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]


@dataclass
class MlpNetwork:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise RejectedInputError(
                    f"layer dims incompatible: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def sizes(self):
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self):
        """Flat list of parameter arrays: W_1, b_1, W_2, b_2, ..."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params

    def copy(self):
        return MlpNetwork(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_mlp(sizes, rng, hidden_activation="relu", output_activation="linear"):
    """Build an MLP with fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    ``sizes`` lists every width including input and output, e.g. ``[2, 64, 20]``.
    Biases start at zero.
    """
    if len(sizes) < 2:
        raise RejectedInputError("an MLP needs at least input and output sizes")
    layers = []
    n_layers = len(sizes) - 1
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        act = output_activation if k == n_layers - 1 else hidden_activation
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return MlpNetwork(layers)


@dataclass
class ForwardCache:
    network: MlpNetwork
    inputs: list  # input to each layer
    pre_activations: list
    output_shape: tuple


def mlp_forward(net, batch):
    """Run ``batch`` through ``net``; returns ``(output, cache)``."""
    x = as_matrix(batch)
    if x.shape[1] != net.in_dim:
        raise RejectedInputError(
            f"batch has {x.shape[1]} columns, network expects {net.in_dim}"
        )
    inputs, pre = [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weights + layer.bias
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    return h, ForwardCache(net, inputs, pre, h.shape)


def mlp_backward(net, cache, output_grad):
    """Backpropagate ``output_grad`` (dLoss/dOutput).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is aligned with
    ``net.parameters()``.
    """
    if cache.network is not net or len(cache.inputs) != len(net.layers):
        raise RejectedInputError("cache does not belong to this network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.output_shape:
        raise RejectedInputError(
            f"output_grad shape {g.shape} != forward output shape {cache.output_shape}"
        )
    grads = [None] * (2 * len(net.layers))
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation == "relu":
            g = g * (cache.pre_activations[k] > 0)
        grads[2 * k] = cache.inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.weights.T
    return grads, g


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise RejectedInputError("Adam betas must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise RejectedInputError("learning rate must be positive")

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
        return state


def adam_update(state, params, grads):
    """One Adam step, applied to ``params`` in place.

    Returns ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise RejectedInputError("params, grads and Adam moments differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise RejectedInputError(
                f"shape mismatch: param {p.shape}, grad {np.shape(g)}, moment {m.shape}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
    return params, state
