"""Attention block grafted onto the compact network.

Feature maps are flattened to row-major token sequences, projected to
Q/K/V through linear layers followed by batch normalization, and scored
with scaled dot products plus a translation-invariant relative position
bias: one learnable table per head indexed by (|dy|, |dx|). The output
path applies BN, Hardswish, a token-space residual, and a two-layer MLP.

The grid is a fixed hyperparameter of the block: training patches and
inference windows must share it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import Tensor, gather_bias, hardswish, softmax


@dataclass
class TokenGrid:
    tokens: "Tensor"     # (B, N, C) with N = H * W
    grid: tuple          # (H, W)


def flatten_tokens(f) -> TokenGrid:
    """(B, C, H, W) -> row-major tokens: tokens[b, y*W + x, c] = f[b, c, y, x]."""
    B, C, H, W = f.shape
    return TokenGrid(tokens=f.reshape((B, C, H * W)).transpose(0, 2, 1), grid=(H, W))


def unflatten_tokens(tg: TokenGrid):
    B, N, C = tg.tokens.shape
    H, W = tg.grid
    return tg.tokens.transpose(0, 2, 1).reshape((B, C, H, W))


def relative_index_table(grid):
    """Flat (N, N) lookup: token pair (i, j) -> |dy| * W + |dx|."""
    H, W = grid
    ys, xs = np.divmod(np.arange(H * W), W)
    ady = np.abs(ys[:, None] - ys[None, :])
    adx = np.abs(xs[:, None] - xs[None, :])
    return ady * W + adx


class AttentionParams(nn.Module):
    """Multi-head attention over a fixed token grid with per-head bias tables."""

    def __init__(self, channels, grid, heads=4, d_k=None, d_v=None, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.grid = tuple(grid)
        self.heads = heads
        self.d_k = d_k or channels // heads
        self.d_v = d_v or channels // heads
        if heads * self.d_v != channels:
            raise ValueError(
                f"heads*d_v must equal the channel count: {heads}*{self.d_v} != {channels}")
        self.q_proj = nn.Linear(channels, heads * self.d_k, rng=rng)
        self.q_bn = nn.BatchNorm(heads * self.d_k, channel_axis=-1)
        self.k_proj = nn.Linear(channels, heads * self.d_k, rng=rng)
        self.k_bn = nn.BatchNorm(heads * self.d_k, channel_axis=-1)
        self.v_proj = nn.Linear(channels, heads * self.d_v, rng=rng)
        self.v_bn = nn.BatchNorm(heads * self.d_v, channel_axis=-1)
        from .tensor import Parameter, default_dtype

        H, W = self.grid
        self.rpb_table = Parameter(np.zeros((heads, H, W), dtype=default_dtype()))
        self._index = relative_index_table(self.grid)

    def _split_heads(self, t, dim):
        B, N, _ = t.shape
        return t.reshape((B, N, self.heads, dim)).transpose(0, 2, 1, 3)

    def scores(self, tg: TokenGrid):
        if tg.grid != self.grid:
            raise ValueError(
                f"token grid {tg.grid} does not match the fixed attention grid {self.grid}")
        q = self._split_heads(self.q_bn(self.q_proj(tg.tokens)), self.d_k)
        k = self._split_heads(self.k_bn(self.k_proj(tg.tokens)), self.d_k)
        v = self._split_heads(self.v_bn(self.v_proj(tg.tokens)), self.d_v)
        scale = 1.0 / math.sqrt(self.d_k)
        content = (q @ k.transpose(0, 1, 3, 2)) * scale
        bias = gather_bias(self.rpb_table, self._index)        # (h, N, N)
        B, N = content.shape[0], content.shape[2]
        scores = content + bias.reshape((1, self.heads, N, N))
        return scores, v

    def attention_weights(self, tg: TokenGrid):
        scores, _ = self.scores(tg)
        return softmax(scores, axis=-1)

    def forward(self, tg: TokenGrid):
        scores, v = self.scores(tg)
        attn = softmax(scores, axis=-1)
        out = attn @ v                                          # (B, h, N, d_v)
        B, _, N, _ = out.shape
        merged = out.transpose(0, 2, 1, 3).reshape((B, N, self.heads * self.d_v))
        return merged


def attention_forward(tg: TokenGrid, params: AttentionParams):
    return params(tg)


def export_attention(tg: TokenGrid, params: AttentionParams):
    """Post-softmax attention weights per head, (B, h, N, N)."""
    return params.attention_weights(tg)


class TransformerBlock(nn.Module):
    """Attention followed by BN, Hardswish, residual add and a 2-layer MLP."""

    def __init__(self, channels, grid, heads=4, mlp_ratio=2, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.attn = AttentionParams(channels, grid, heads=heads, rng=rng)
        self.attn_bn = nn.BatchNorm(channels, channel_axis=-1)
        hidden = int(mlp_ratio * channels)
        self.mlp1 = nn.Linear(channels, hidden, bias=True, rng=rng)
        self.mlp2 = nn.Linear(hidden, channels, bias=True, rng=rng)

    def forward(self, f, return_attention=False):
        tg = flatten_tokens(f)
        if return_attention:
            attn_weights = self.attn.attention_weights(tg)
        f_attn = self.attn(tg)
        h = hardswish(self.attn_bn(f_attn)) + tg.tokens
        h = self.mlp2(hardswish(self.mlp1(h)))
        out = unflatten_tokens(TokenGrid(tokens=h, grid=tg.grid))
        if return_attention:
            return out, attn_weights
        return out
