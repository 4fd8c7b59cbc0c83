"""Local State Attention encoder.

M stacked blocks, each a multi-head scaled dot-product self-attention over
the N x X observation followed by a K x K linear map on the flattened
result (K = N * X). No biases, residuals or normalisation layers. All
functions accept a leading batch axis.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def attention_weights(q, k) -> Tensor:
    """Row-stochastic weights softmax(q k^T / sqrt(d))."""
    q, k = T.as_tensor(q), T.as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise T.ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    return T.softmax_rows(T.matmul(q, T.transpose(k)) * scale)


def attention(q, k, v) -> Tensor:
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"keys and values disagree on length: {k.shape} vs {v.shape}")
    return T.matmul(attention_weights(q, k), v)


def multi_head(o, params: dict, block: int, n_heads: int, prefix: str = "lsa") -> Tensor:
    """Concatenated per-head attention on shared input o, projected by W^O."""
    o = T.as_tensor(o)
    heads = []
    for i in range(1, n_heads + 1):
        base = f"{prefix}.block{block}.head{i}"
        heads.append(attention(T.matmul(o, params[f"{base}.WQ"]),
                               T.matmul(o, params[f"{base}.WK"]),
                               T.matmul(o, params[f"{base}.WV"])))
    joined = heads[0] if n_heads == 1 else T.concat(heads, axis=-1)
    return T.matmul(joined, params[f"{prefix}.block{block}.WO"])


def feed_forward(y, w_ff) -> Tensor:
    """Flatten each N x X matrix to length K, multiply by W^FF, reshape back."""
    y = T.as_tensor(y)
    n, x = y.shape[-2:]
    lead = y.shape[:-2]
    flat = T.reshape(y, (int(np.prod(lead)) if lead else 1, n * x))
    return T.reshape(T.matmul(flat, w_ff), lead + (n, x))


def encode(o, params: dict, n_heads: int, n_blocks: int = 1, prefix: str = "lsa") -> Tensor:
    """Encoded state of length K (per batch element)."""
    o = T.as_tensor(o)
    n, x = o.shape[-2:]
    k = params[f"{prefix}.block1.WFF"].shape[0]
    if n * x != k or params[f"{prefix}.block1.WO"].shape[0] != x:
        raise T.ShapeError(f"observation {o.shape} does not match encoder with K={k}")
    y = o
    for m in range(1, n_blocks + 1):
        y = feed_forward(multi_head(y, params, m, n_heads, prefix), params[f"{prefix}.block{m}.WFF"])
    return T.reshape(y, o.shape[:-2] + (n * x,))


def init_params(n_obs: int, n_features: int, n_heads: Optional[int] = None, n_blocks: int = 1,
                rng: Optional[np.random.Generator] = None, prefix: str = "lsa") -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; h defaults to X/2."""
    n_heads = n_features // 2 if n_heads is None else n_heads
    if n_heads < 1 or n_features % n_heads:
        raise ValueError(f"{n_heads} heads do not divide {n_features} features")
    rng = np.random.default_rng() if rng is None else rng
    d = n_features // n_heads
    k = n_obs * n_features
    params = {}

    def uniform(name, shape):
        bound = 1.0 / math.sqrt(shape[0])
        params[name] = T.parameter(rng.uniform(-bound, bound, size=shape), name)

    for m in range(1, n_blocks + 1):
        for i in range(1, n_heads + 1):
            for w in ("WQ", "WK", "WV"):
                uniform(f"{prefix}.block{m}.head{i}.{w}", (n_features, d))
        uniform(f"{prefix}.block{m}.WO", (n_features, n_features))
        uniform(f"{prefix}.block{m}.WFF", (k, k))
    return params


class LsaEncoder:
    """Parameter container plus the encode call for one encoder instance."""

    def __init__(self, n_obs: int, n_features: int, n_heads: Optional[int] = None, n_blocks: int = 1,
                 rng: Optional[np.random.Generator] = None, prefix: str = "lsa"):
        self.n_obs, self.n_features = n_obs, n_features
        self.n_heads = n_features // 2 if n_heads is None else n_heads
        self.n_blocks = n_blocks
        self.prefix = prefix
        self.params = init_params(n_obs, n_features, self.n_heads, n_blocks, rng, prefix)

    @property
    def out_dim(self) -> int:
        return self.n_obs * self.n_features

    def __call__(self, o) -> Tensor:
        return encode(o, self.params, self.n_heads, self.n_blocks, self.prefix)


class FlattenEncoder:
    """Identity encoder: feeds the raw flattened observation (plain MAPPO baseline)."""

    def __init__(self, n_obs: int, n_features: int):
        self.n_obs, self.n_features = n_obs, n_features
        self.params = {}

    @property
    def out_dim(self) -> int:
        return self.n_obs * self.n_features

    def __call__(self, o) -> Tensor:
        o = T.as_tensor(o)
        return T.reshape(o, o.shape[:-2] + (self.out_dim,))
