"""Small layers built from ops, each registering its weights in a ParamStore."""

from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamStore
from .tensor import Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = store.glorot(f"{name}.w", (d_in, d_out), rng)
        self.b = store.zeros(f"{name}.b", (d_out,))

    def __call__(self, x) -> Tensor:
        return ops.bias_add(ops.matmul(x, self.w), self.b)


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, name: str, sizes: list[int], rng: np.random.Generator,
                 final_relu: bool = False):
        self.layers = [Linear(store, f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.final_relu = final_relu

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = ops.relu(x)
        return x


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.ones(f"{name}.gamma", (d,))
        self.beta = store.zeros(f"{name}.beta", (d,))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention:
    """Single attention layer with residual connection and layer norm.

    ``query`` (..., n_q, d) attends over ``context`` (..., n_k, d); with
    ``context=None`` it is self-attention.
    """

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(store, f"{name}.q", d, d, rng)
        self.k = Linear(store, f"{name}.k", d, d, rng)
        self.v = Linear(store, f"{name}.v", d, d, rng)
        self.o = Linear(store, f"{name}.o", d, d, rng)
        self.norm = LayerNorm(store, f"{name}.norm", d)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = ops.reshape(x, lead + (n, self.heads, self.d // self.heads))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return ops.transpose(x, axes)

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        x = ops.transpose(x, axes)
        return ops.reshape(x, x.shape[:-2] + (self.d,))

    def __call__(self, query: Tensor, context: Tensor | None = None, key_mask: np.ndarray | None = None) -> Tensor:
        context = query if context is None else context
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        mask = None
        if key_mask is not None:
            # (..., n_k) -> (..., 1 head axis, 1 query axis, n_k)
            mask = np.asarray(key_mask, bool)[..., None, None, :]
        att = self._merge(ops.attention(q, k, v, mask))
        return self.norm(ops.add(query, self.o(att)))


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.w = store.glorot(f"{name}.w", (c_out, c_in, k, k), rng, fan_in=c_in * k * k, fan_out=c_out * k * k)
        self.b = store.zeros(f"{name}.b", (c_out,))
        self.stride, self.padding = stride, padding

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
