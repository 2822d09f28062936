"""Parameter initialisation and transformer building blocks on the autodiff engine."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

Params = Dict[str, np.ndarray]


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


def init_linear(params: Params, prefix: str, rng, fan_in: int, fan_out: int) -> None:
    params[f"{prefix}.w"] = glorot(rng, fan_in, fan_out)
    params[f"{prefix}.b"] = np.zeros(fan_out)


def init_layer_norm(params: Params, prefix: str, dim: int) -> None:
    params[f"{prefix}.g"] = np.ones(dim)
    params[f"{prefix}.b"] = np.zeros(dim)


def init_encoder(params: Params, prefix: str, rng, dim: int, n_layers: int, ffn_mult: int) -> None:
    for l in range(n_layers):
        p = f"{prefix}.{l}"
        init_layer_norm(params, f"{p}.ln1", dim)
        init_linear(params, f"{p}.q", rng, dim, dim)
        init_linear(params, f"{p}.kv", rng, dim, 2 * dim)
        init_linear(params, f"{p}.o", rng, dim, dim)
        init_layer_norm(params, f"{p}.ln2", dim)
        init_linear(params, f"{p}.ff1", rng, dim, ffn_mult * dim)
        init_linear(params, f"{p}.ff2", rng, ffn_mult * dim, dim)
    init_layer_norm(params, f"{prefix}.ln_out", dim)


class Dropout:
    """Draws inverted-dropout masks from ``rng``; a no-op when ``rng`` is None."""

    def __init__(self, rate: float, rng: Optional[np.random.Generator]):
        self.rate = rate
        self.rng = rng

    @property
    def active(self) -> bool:
        return self.rng is not None and self.rate > 0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.active:
            return x
        keep = self.rng.uniform(size=x.shape) >= self.rate
        return ad.dropout(x, keep / (1.0 - self.rate))


def linear(P, prefix: str, x: Tensor) -> Tensor:
    return ad.matmul(x, P[f"{prefix}.w"]) + P[f"{prefix}.b"]


def layer_norm(P, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, s, e = x.shape
    return ad.transpose(ad.reshape(x, (n, s, n_heads, e // n_heads)), (0, 2, 1, 3))


def attention(P, prefix: str, h: Tensor, key_mask: Optional[np.ndarray], n_heads: int,
              query_first_only: bool = False) -> Tensor:
    """Multi-head self-attention over (N, S, E); ``key_mask`` is (N, S) bool or None."""
    n, s, e = h.shape
    d = e // n_heads
    hq = h[:, :1] if query_first_only else h
    q = _split_heads(linear(P, f"{prefix}.q", hq), n_heads)
    kv = ad.reshape(linear(P, f"{prefix}.kv", h), (n, s, 2, n_heads, d))
    kv = ad.transpose(kv, (2, 0, 3, 1, 4))
    k, v = kv[0], kv[1]
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    mask = None if key_mask is None else key_mask[:, None, None, :]
    probs = ad.softmax(scores, mask=mask)
    ctx = ad.matmul(probs, v)
    sq = ctx.shape[2]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, sq, e))
    return linear(P, f"{prefix}.o", ctx)


def encoder(P, prefix: str, x: Tensor, key_mask: Optional[np.ndarray], n_layers: int, n_heads: int,
            drop: Dropout, first_only: bool = False) -> Tensor:
    """Pre-norm transformer stack.

    With ``first_only`` the last layer computes position 0 alone and an
    (N, 1, E) tensor is returned; other positions would be discarded anyway.
    """
    for l in range(n_layers):
        p = f"{prefix}.{l}"
        last_cls = first_only and l == n_layers - 1
        h = layer_norm(P, f"{p}.ln1", x)
        a = attention(P, p, h, key_mask, n_heads, query_first_only=last_cls)
        base = x[:, :1] if last_cls else x
        x = base + drop(a)
        h2 = layer_norm(P, f"{p}.ln2", x)
        f = linear(P, f"{p}.ff2", ad.relu(linear(P, f"{p}.ff1", h2)))
        x = x + drop(f)
    return layer_norm(P, f"{prefix}.ln_out", x)


def batch_norm(P, prefix: str, x: Tensor, buffers: Dict[str, np.ndarray], training: bool,
               eps: float = 1e-5):
    """Batch norm over axis 0. Returns (output, (batch_mean, batch_var) or None)."""
    if training:
        mu = ad.mean(x, axis=0)
        xc = x - mu
        var = ad.mean(xc * xc, axis=0)
        xhat = xc * ad.pow_(var + eps, -0.5)
        stats = (mu.data.copy(), var.data.copy())
    else:
        mu = buffers[f"{prefix}.running_mean"]
        var = buffers[f"{prefix}.running_var"]
        xhat = (x - mu) * (1.0 / np.sqrt(var + eps))
        stats = None
    return xhat * P[f"{prefix}.g"] + P[f"{prefix}.b"], stats
