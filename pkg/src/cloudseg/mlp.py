"""Small dense networks with hand-written forward and backward passes.

Every learnable component in this package (boundary predictor, weight nets,
feature nets, classifier head) is a stack of affine layers with ReLU between
them, applied row-wise to float64 arrays. There is no autodiff framework:
``forward`` returns a cache and ``backward`` turns an output gradient into
parameter gradients plus the gradient w.r.t. the input rows, so stacks
compose by hand.
"""

from __future__ import annotations

import numpy as np


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return (z > 0.0).astype(np.float64)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_OUT_ACTIVATIONS = ("linear", "relu", "sigmoid")


class Mlp:
    """Affine stack with ReLU between layers and a configurable output head.

    Weights are ``(fan_in, fan_out)`` float64 arrays so rows of the input map
    through ``x @ w + b``. The same instance is shared across all rows it is
    applied to, which is what makes it usable per point or per neighbor pair.
    """

    def __init__(self, weights, biases, out_activation: str = "linear"):
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        if out_activation not in _OUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("each layer needs a 2-d weight and matching bias")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ValueError("layer widths do not chain")
        self.out_activation = out_activation

    @classmethod
    def create(cls, widths, rng: np.random.Generator, out_activation: str = "linear") -> "Mlp":
        """He-scaled Gaussian init for the given layer widths."""
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        weights, biases = [], []
        for fan_in, fan_out in zip(widths, widths[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, out_activation)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray):
        """Map rows of ``x`` through the stack. Returns (output, cache)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ValueError(
                f"expected input of shape (rows, {self.in_width}), got {x.shape}"
            )
        inputs = []
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = relu(z) if i < last else self._out(z)
        return h, (inputs, pre, h)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def _out(self, z: np.ndarray) -> np.ndarray:
        if self.out_activation == "linear":
            return z
        if self.out_activation == "relu":
            return relu(z)
        return sigmoid(z)

    def backward(self, cache, dy: np.ndarray):
        """Backpropagate an output-row gradient.

        Returns ``(dx, grads)`` where grads maps ``w0, b0, w1, ...`` to arrays
        shaped like the parameters.
        """
        inputs, pre, out = cache
        grads: dict[str, np.ndarray] = {}
        last = len(self.weights) - 1
        if self.out_activation == "linear":
            dz = dy
        elif self.out_activation == "relu":
            dz = dy * relu_grad(pre[last])
        else:
            dz = dy * out * (1.0 - out)
        for i in range(last, -1, -1):
            grads[f"w{i}"] = inputs[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dx = dz @ self.weights[i].T
            if i > 0:
                dz = dx * relu_grad(pre[i - 1])
        return dx, grads

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def min_hidden_margin(self, cache) -> float:
        """Smallest |pre-activation| over all ReLU units in the cached pass.

        Finite-difference checks are only trustworthy when no unit sits at
        the ReLU kink; callers use this to reject unsafe instances.
        """
        inputs, pre, _ = cache
        margins = [np.min(np.abs(z)) for z in pre[:-1]]
        if self.out_activation == "relu":
            margins.append(np.min(np.abs(pre[-1])))
        return float(min(margins)) if margins else np.inf
