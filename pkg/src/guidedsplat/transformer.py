"""Multi-resolution guidance transformer.

Each level runs, in order: cross-attention from image tokens onto projected
text tokens, cross-attention from that result onto projected point tokens, a
gamma-gated residual add-norm back onto the *original* image tokens, then a
post-norm self-attention block and a post-norm feedforward block.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ShapeError


class MultiHeadAttention(nn.Module):
    """softmax(Q K^T / sqrt(d)) V per head; ``d`` is the head width unless
    ``scale='full_dim'``, which divides by the full model width instead."""

    def __init__(self, dim: int, heads: int, scale: str = "head"):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"{heads} heads do not divide width {dim}")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.scale_mode = scale
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim)

    def forward(self, q_src, kv_src, return_weights: bool = False):
        if q_src.ndim != 2 or kv_src.ndim != 2 or q_src.shape[1] != self.dim \
                or kv_src.shape[1] != self.dim:
            raise ShapeError(
                f"attention expects (T, {self.dim}) inputs, got {tuple(q_src.shape)} "
                f"and {tuple(kv_src.shape)}")
        tq, tk, h, dh = q_src.shape[0], kv_src.shape[0], self.heads, self.head_dim
        q = self.wq(q_src).view(tq, h, dh).transpose(0, 1)
        k = self.wk(kv_src).view(tk, h, dh).transpose(0, 1)
        v = self.wv(kv_src).view(tk, h, dh).transpose(0, 1)
        denom = math.sqrt(dh if self.scale_mode == "head" else self.dim)
        weights = torch.softmax(q @ k.transpose(-1, -2) / denom, dim=-1)
        out = self.wo((weights @ v).transpose(0, 1).reshape(tq, self.dim))
        return (out, weights) if return_weights else out


def dropout_mask(shape, rate: float, rng, dtype) -> torch.Tensor:
    keep = rng.random(tuple(shape)) >= rate
    return torch.as_tensor(keep / (1.0 - rate), dtype=dtype)


def gated_add_norm(base, fused, gamma: float, norm: nn.LayerNorm, dropout_rate: float = 0.0,
                   training: bool = False, rng=None):
    """Norm(base + gamma * Dropout(fused)); dropout is the identity unless training."""
    if base.shape != fused.shape:
        raise ShapeError(f"shapes differ: {tuple(base.shape)} vs {tuple(fused.shape)}")
    if training and dropout_rate > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an explicit rng")
        fused = fused * dropout_mask(fused.shape, dropout_rate, rng, fused.dtype)
    return norm(base + gamma * fused)


class GuidanceLayer(nn.Module):
    def __init__(self, dim: int, heads: int, text_dim: int, point_dim: int,
                 ffn_ratio: int = 4, scale: str = "head", dropout: float = 0.1):
        super().__init__()
        self.dim = dim
        self.dropout = dropout
        self.token_proj_c = nn.Linear(text_dim, dim)
        self.token_proj_s = nn.Linear(point_dim, dim)
        self.context_attn = MultiHeadAttention(dim, heads, scale)
        self.spatial_attn = MultiHeadAttention(dim, heads, scale)
        self.gate_norm = nn.LayerNorm(dim, eps=1e-5)
        self.self_attn = MultiHeadAttention(dim, heads, scale)
        self.attn_norm = nn.LayerNorm(dim, eps=1e-5)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_ratio * dim), nn.GELU(),
                                 nn.Linear(ffn_ratio * dim, dim))
        self.ffn_norm = nn.LayerNorm(dim, eps=1e-5)

    def forward(self, feats, text_tokens, point_tokens, gamma: float = 0.5,
                use_contextual: bool = True, use_spatial: bool = True,
                training: bool = False, rng=None, trace=None):
        """feats (H, W, D) -> refined (H, W, D)."""
        h, w, d = feats.shape
        if d != self.dim:
            raise ShapeError(f"layer width {self.dim} got features of width {d}")
        x = feats.reshape(h * w, d)
        fused = x
        if use_contextual:
            fused = self.context_attn(fused, self.token_proj_c(text_tokens))
            _log(trace, "contextual_cross_attention")
        if use_spatial:
            fused = self.spatial_attn(fused, self.token_proj_s(point_tokens))
            _log(trace, "spatial_cross_attention")
        y = gated_add_norm(x, fused, gamma, self.gate_norm, self.dropout, training, rng)
        _log(trace, "gated_add_norm")
        y = self.attn_norm(y + self.self_attn(y, y))
        _log(trace, "self_attention")
        y = self.ffn_norm(y + self.ffn(y))
        return y.reshape(h, w, d)


def _log(trace, event):
    if trace is not None:
        trace.append(event)


class GuidanceTransformer(nn.Module):
    """One GuidanceLayer per pyramid level; levels never attend to each other."""

    def __init__(self, widths, heads: int, text_dim: int, point_dim: int, ffn_ratio: int = 4,
                 scale: str = "head", dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(
            GuidanceLayer(w, heads, text_dim, point_dim, ffn_ratio, scale, dropout)
            for w in widths)

    def forward(self, pyramid, text_tokens, point_tokens, gamma=0.5, use_contextual=True,
                use_spatial=True, training=False, rng=None, trace=None):
        if len(pyramid) != len(self.layers):
            raise ConfigError(f"{len(pyramid)} pyramid levels for {len(self.layers)} layers")
        streams = rng.split(len(self.layers)) if rng is not None else [None] * len(self.layers)
        out = []
        for i, (layer, feats) in enumerate(zip(self.layers, pyramid)):
            _log(trace, f"layer_{i + 1}")
            out.append(layer(feats, text_tokens, point_tokens, gamma, use_contextual,
                             use_spatial, training, streams[i], trace))
        return out
