"""Shared transformer building blocks.

All modules operate on unbatched sequences shaped (positions, channels);
desk-scale work here never needs a batch dimension. Blocks are pre-norm
(LayerNorm before attention/FFN, residual after), which keeps gradients
well-behaved in the frozen-LM setting.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import NumericError


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activation in {where}")
    return x


class MultiHeadAttention(nn.Module):
    """Multi-head attention over unbatched (T, d) sequences.

    Self-attention when query and key/value inputs coincide; cross-attention
    otherwise. `causal=True` masks each query position to keys at the same or
    earlier positions (square inputs only).
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, kv: torch.Tensor, causal: bool = False) -> torch.Tensor:
        t, d = query.shape
        s = kv.shape[0]
        h, dh = self.num_heads, self.head_dim
        q = self.q_proj(query).view(t, h, dh).transpose(0, 1)
        k = self.k_proj(kv).view(s, h, dh).transpose(0, 1)
        v = self.v_proj(kv).view(s, h, dh).transpose(0, 1)
        scores = (q @ k.transpose(1, 2)) / math.sqrt(dh)
        if causal:
            mask = torch.triu(
                torch.ones(t, s, dtype=torch.bool, device=scores.device), diagonal=1
            )
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(t, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + FFN; full attention unless `causal` is set."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.attn_norm(x)
        x = x + self.attn(normed, normed, causal=self.causal)
        return x + self.ffn(self.ffn_norm(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention + FFN on the query stream; key/value fixed."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim)
        self.kv_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, queries: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        x = queries + self.attn(self.query_norm(queries), self.kv_norm(kv))
        return x + self.ffn(self.ffn_norm(x))


def init_module(module: nn.Module, seed: int):
    """Deterministic re-initialization from a dedicated generator.

    Linear weights: zero-mean scaled uniform (bound 1/sqrt(fan_in)); biases
    zero; LayerNorm identity; Embedding N(0, 0.05). Parameters registered
    directly on modules (latents, positional tables) are owned by their
    module and initialized there.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, nn.Embedding):
                m.weight.normal_(0.0, 0.05, generator=gen)
    return gen
