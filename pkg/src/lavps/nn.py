"""Minimal fully-connected network with hand-written backpropagation."""

from __future__ import annotations

import hashlib

import numpy as np

from ._utils import as_generator

N_FREQUENCIES = 4
EMBED_DIM = 1 + 2 * N_FREQUENCIES


def time_embedding(t, T: int) -> np.ndarray:
    """Features ``(t/T, sin(2 pi f t/T), cos(2 pi f t/T))`` for ``f = 1, 2, 4, 8``."""
    u = np.asarray(t, dtype=np.float64)[..., None] / T
    freqs = 2.0 ** np.arange(N_FREQUENCIES)
    ang = 2.0 * np.pi * u * freqs
    return np.concatenate([u, np.sin(ang), np.cos(ang)], axis=-1)


class MLP:
    """``tanh`` network ``in -> hidden... -> out`` acting on row batches.

    Parameters live in ``self.params`` as ``W0, b0, W1, b1, ...`` so the
    checkpoint writer and the Adam optimiser can treat them uniformly.
    """

    def __init__(self, sizes, rng=None, zero_last: bool = False):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        rng = as_generator(rng)
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            if zero_last and i == len(sizes) - 2:
                W[:] = 0.0
                b[:] = 0.0
            self.params[f"W{i}"] = W
            self.params[f"b{i}"] = b

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, X, cache: bool = False):
        h = np.asarray(X, dtype=np.float64)
        acts = [h]
        for i in range(self.n_layers):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if cache else h

    def backward(self, acts, grad_out, need_input: bool = False):
        """Gradients of ``sum(grad_out * out)`` w.r.t. the parameters (and input)."""
        grads = {}
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0 or need_input:
                g = g @ self.params[f"W{i}"].T
        return (grads, g) if need_input else grads

    def input_vjp(self, X, v):
        """Return ``(f(X), J_X^T v)`` row by row."""
        out, acts = self.forward(X, cache=True)
        _, gx = self.backward(acts, v, need_input=True)
        return out, gx

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W, b = np.asarray(state[f"W{i}"]), np.asarray(state[f"b{i}"])
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"layer {i}: shape mismatch in state dict")
            self.params[f"W{i}"] = W.astype(np.float64).copy()
            self.params[f"b{i}"] = b.astype(np.float64).copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()
