"""Layers built on :mod:`manualpa.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def load_state(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.parameters().items()}


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = T.param(w)
        self.bias = T.param(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        x = T._lift(x)
        if x.ndim == 1:
            return (T.matmul(x.reshape(1, -1), self.weight) + self.bias).reshape(-1)
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = T.param(np.ones(dim))
        self.shift = T.param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.shift


class MultiHeadAttention(Module):
    """Scaled dot-product attention over the second-to-last axis.

    Returns the output and the attention weights averaged over heads
    (a plain array, kept for inspection).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = x.reshape(tuple(lead) + (n, self.heads, d // self.heads))
        return T.swapaxes(x, -2, -3)

    def __call__(self, x, memory):
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scale = 1.0 / np.sqrt(q.shape[-1])
        attn = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * scale, axis=-1)
        ctx = T.swapaxes(T.matmul(attn, v), -2, -3)
        ctx = ctx.reshape(ctx.shape[:-2] + (ctx.shape[-2] * ctx.shape[-1],))
        return self.out(ctx), attn.data.mean(axis=-3)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
