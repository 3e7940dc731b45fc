"""Minimal dense MLP with explicit forward/backward passes.

Kept framework-free so the training loss admits an exact finite-difference
gradient check.
"""

from __future__ import annotations

import numpy as np


class MLP:
    """Fully connected net with tanh hidden activations and a linear head."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, final_scale: float = 0.01):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / (n_in + n_out))
            if i == len(sizes) - 2:
                scale *= final_scale
            self.weights.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    def forward(self, x: np.ndarray):
        """Returns (output, cache) with cache holding layer inputs for backward."""
        x = np.atleast_2d(x)
        cache = [x]
        h = x
        n = len(self.weights)
        for i in range(n):
            z = h @ self.weights[i] + self.biases[i]
            h = np.tanh(z) if i < n - 1 else z
            cache.append(h)
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dout: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output); returns (dWs, dbs)."""
        n = len(self.weights)
        dws = [None] * n
        dbs = [None] * n
        grad = np.atleast_2d(dout)
        for i in reversed(range(n)):
            h_in = cache[i]
            dws[i] = h_in.T @ grad
            dbs[i] = grad.sum(axis=0)
            if i > 0:
                grad = grad @ self.weights[i].T
                grad = grad * (1.0 - cache[i] ** 2)
        return dws, dbs

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[offset : offset + w.size].reshape(w.shape).copy()
            offset += w.size
            self.biases[i] = flat[offset : offset + b.size].copy()
            offset += b.size

    @staticmethod
    def flatten_grads(dws, dbs) -> np.ndarray:
        parts = []
        for dw, db in zip(dws, dbs):
            parts.append(dw.ravel())
            parts.append(db.ravel())
        return np.concatenate(parts)
