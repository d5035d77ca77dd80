"""Small fully-connected net with hand-written forward and backward.

ReLU on hidden layers, linear output. Parameters are stored in the dtype
given at init (float32 for trainable state so archives round-trip
bit-exactly); arithmetic runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mlp:
    weights: list = field(default_factory=list)  # each (fan_in, fan_out)
    biases: list = field(default_factory=list)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[1] if len(self.weights) > 1 else 0

    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def init_mlp(
    in_dim: int,
    out_dim: int,
    hidden_layers: int,
    width: int,
    rng: np.random.Generator,
    dtype=np.float32,
    final_zero: bool = False,
) -> Mlp:
    """He-initialized net; final_zero starts the output layer at exactly 0."""
    dims = [in_dim] + [width] * hidden_layers + [out_dim]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        if last and final_zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        weights.append(np.asarray(w, dtype=dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(weights, biases)


def zeros_mlp(in_dim: int, out_dim: int, hidden_layers: int, width: int, dtype=np.float32) -> Mlp:
    dims = [in_dim] + [width] * hidden_layers + [out_dim]
    weights = [np.zeros((dims[i], dims[i + 1]), dtype=dtype) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1], dtype=dtype) for i in range(len(dims) - 1)]
    return Mlp(weights, biases)


def _row_stable_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x @ w computed row by row (gemv).

    BLAS gemm picks micro-kernels by call shape, so batch results can
    drift from single-row results in the last ulp; gemv depends only on
    the row itself, which keeps batch ops bit-identical to per-row ops.
    """
    out = np.empty((x.shape[0], w.shape[1]), dtype=np.float64)
    for i in range(x.shape[0]):
        out[i] = x[i] @ w
    return out


def mlp_forward(net: Mlp, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Run the net on (N, in_dim) rows; pass cache=[] to record activations."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(net.weights)
    for i in range(n_layers):
        if cache is not None:
            cache.append(h)
        h = _row_stable_matmul(h, net.weights[i].astype(np.float64)) + net.biases[i].astype(np.float64)
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def mlp_backward(net: Mlp, cache: list, d_out: np.ndarray):
    """Gradients from cached activations: returns (d_x, d_weights, d_biases)."""
    d_weights = [None] * len(net.weights)
    d_biases = [None] * len(net.biases)
    g = np.asarray(d_out, dtype=np.float64)
    for i in range(len(net.weights) - 1, -1, -1):
        h_in = cache[i]
        if i < len(net.weights) - 1:
            # ReLU mask from the stored layer input of the next layer.
            g = g * (cache[i + 1] > 0.0)
        d_weights[i] = h_in.T @ g
        d_biases[i] = g.sum(axis=0)
        g = g @ net.weights[i].astype(np.float64).T
    return g, d_weights, d_biases
