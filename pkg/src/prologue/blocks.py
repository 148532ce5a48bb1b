"""Minimal transformer blocks with explicit attention so probabilities can be
captured for diagnostics and masks can be injected by tests."""

import torch
import torch.nn.functional as F
from torch import nn


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, allowed=None, need_attn=False):
        """allowed: optional bool [L, L]; False entries are masked out."""
        b, L, d = x.shape
        qkv = self.qkv(x).reshape(b, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, L, d)
        out = self.drop(self.proj(out))
        return out, (attn if need_attn else None)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x, allowed=None, need_attn=False):
        h, attn = self.attn(self.norm1(x), allowed=allowed, need_attn=need_attn)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class TransformerStack(nn.Module):
    """A stack of blocks; returns final states and per-layer attention maps."""

    def __init__(self, dim: int, layers: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, allowed=None, need_attn=False):
        attns = []
        for block in self.blocks:
            x, attn = block(x, allowed=allowed, need_attn=need_attn)
            if need_attn:
                attns.append(attn)
        return self.norm(x), attns


def causal_mask(length: int, device=None) -> torch.Tensor:
    return torch.tril(torch.ones(length, length, dtype=torch.bool, device=device))


def cross_group_block_mask(num_queries: int, total: int, device=None) -> torch.Tensor:
    """Bidirectional mask with attention between the query group and the rest
    removed in both directions (test hook for the shared encoder)."""
    allowed = torch.ones(total, total, dtype=torch.bool, device=device)
    allowed[:num_queries, num_queries:] = False
    allowed[num_queries:, :num_queries] = False
    return allowed
