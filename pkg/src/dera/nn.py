"""Transformer building blocks over the autodiff substrate.

Pre-norm blocks, GELU MLP with expansion 4, learned positional tables.
Layers register their parameters in a ParamStore under a dotted name
prefix; everything reachable from a prefix can be selected as a gradient
subset (the conflict projection scopes to "encoder.").
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    add,
    broadcast_to,
    concat,
    constant,
    gelu,
    layer_norm,
    matmul,
    mul,
    permute,
    reshape,
    softmax,
    swapaxes,
)

_MASK_FILL = -1e9


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, std: float = 0.02):
        self.d_in = d_in
        self.d_out = d_out
        self.w = store.create(f"{name}.w", (d_in, d_out), std=std)
        self.b = store.create(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, self.d_in))
        y = matmul(flat, self.w.value)
        if self.b is not None:
            y = add(y, self.b.value)
        return reshape(y, (*lead, self.d_out))


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.scale = store.create(f"{name}.scale", (dim,), init="ones")
        self.shift = store.create(f"{name}.shift", (dim,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale.value, self.shift.value, eps=self.eps)


_causal_masks: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(size: int, dtype) -> np.ndarray:
    key = (size, np.dtype(dtype).str)
    mask = _causal_masks.get(key)
    if mask is None:
        mask = np.triu(np.full((size, size), _MASK_FILL, dtype=dtype), k=1)
        _causal_masks[key] = mask
    return mask


class MultiHeadAttention:
    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int,
                 out_std: float = 0.02):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = dim // n_heads
        self.dim = dim
        self.wq = Linear(store, f"{name}.wq", dim, dim)
        self.wk = Linear(store, f"{name}.wk", dim, dim)
        self.wv = Linear(store, f"{name}.wv", dim, dim)
        self.wo = Linear(store, f"{name}.wo", dim, dim, std=out_std)
        self._scale = 1.0 / np.sqrt(self.d_head)

    def _split(self, x: Tensor, B: int, S: int) -> Tensor:
        x = reshape(x, (B, S, self.n_heads, self.d_head))
        x = swapaxes(x, 1, 2)
        return reshape(x, (B * self.n_heads, S, self.d_head))

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        B, S, _ = x.shape
        q = self._split(self.wq(x), B, S)
        k = self._split(self.wk(x), B, S)
        v = self._split(self.wv(x), B, S)
        scores = mul(matmul(q, swapaxes(k, 1, 2)), constant(np.asarray(self._scale, dtype=x.dtype)))
        if causal:
            scores = add(scores, constant(causal_mask(S, x.dtype)))
        attn = softmax(scores, axis=-1)
        out = matmul(attn, v)
        out = reshape(out, (B, self.n_heads, S, self.d_head))
        out = swapaxes(out, 1, 2)
        out = reshape(out, (B, S, self.dim))
        return self.wo(out)


class Mlp:
    def __init__(self, store: ParamStore, name: str, dim: int, expansion: int = 4,
                 out_std: float = 0.02):
        self.fc1 = Linear(store, f"{name}.fc1", dim, dim * expansion)
        self.fc2 = Linear(store, f"{name}.fc2", dim * expansion, dim, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock:
    def __init__(self, store: ParamStore, name: str, dim: int, n_heads: int,
                 out_std: float = 0.02):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, n_heads, out_std=out_std)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.mlp = Mlp(store, f"{name}.mlp", dim, out_std=out_std)

    def __call__(self, x: Tensor, causal: bool = False) -> Tensor:
        x = add(x, self.attn(self.ln1(x), causal=causal))
        x = add(x, self.mlp(self.ln2(x)))
        return x


class TransformerStack:
    """A stack of pre-norm blocks with an optional per-layer tap.

    ``tap_layer`` is 1-based: the tap is the output of that block, so
    tap_layer == n_layers returns the final output itself.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, n_layers: int,
                 n_heads: int):
        # residual-branch output projections scaled down with depth
        out_std = 0.02 / np.sqrt(max(1, 2 * n_layers))
        self.blocks = [
            TransformerBlock(store, f"{name}.block{i}", dim, n_heads, out_std=out_std)
            for i in range(n_layers)
        ]

    def __call__(self, x: Tensor, causal: bool = False,
                 tap_layer: int | None = None) -> tuple[Tensor, Tensor | None]:
        tapped = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, causal=causal)
            if tap_layer is not None and i == tap_layer:
                tapped = x
        return x, tapped


def expand_rows(param_value: Tensor, batch: int) -> Tensor:
    """Broadcast a (N, d) table to (batch, N, d) for concatenation."""
    n, d = param_value.shape
    return broadcast_to(reshape(param_value, (1, n, d)), (batch, n, d))


def sequence_concat(query_block: Tensor, patch_block: Tensor) -> Tensor:
    """Queries are prepended before patch embeddings along the token axis."""
    return concat([query_block, patch_block], axis=1)
