"""Transformer blocks shared by the reasoner, generators and evaluator."""

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.heads = heads
        self.dropout = dropout
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(context_dim, dim)
        self.v = nn.Linear(context_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask: Optional[torch.Tensor] = None):
        """``mask`` is boolean, True where attention is allowed, broadcastable to (B, H, Sq, Sk)."""
        context = x if context is None else context
        q = rearrange(self.q(x), "b s (h d) -> b h s d", h=self.heads)
        k = rearrange(self.k(context), "b s (h d) -> b h s d", h=self.heads)
        v = rearrange(self.v(context), "b s (h d) -> b h s d", h=self.heads)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask,
                                           dropout_p=self.dropout if self.training else 0.0)
        return self.out(rearrange(y, "b h s d -> b s (h d)"))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention, optional cross-attention, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, dropout: float = 0.0,
                 cross_attention: bool = False, context_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout=dropout)
        self.cross = None
        if cross_attention:
            self.norm_cross = nn.LayerNorm(dim)
            self.cross = MultiHeadAttention(dim, heads, context_dim=context_dim, dropout=dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x, mask=None, context=None, context_mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        if self.cross is not None:
            x = x + self.cross(self.norm_cross(x), context=context, mask=context_mask)
        return x + self.mlp(self.norm2(x))


def key_padding_to_mask(key_padding: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    """(B, Sk) True-is-padding -> (B, 1, 1, Sk) True-is-allowed."""
    if key_padding is None:
        return None
    return (~key_padding)[:, None, None, :]


def prefix_causal_mask(prefix_len: int, total_len: int, device=None) -> torch.Tensor:
    """Full visibility inside the prefix, causal over the rest; prefix never sees the rest."""
    i = torch.arange(total_len, device=device)[:, None]
    j = torch.arange(total_len, device=device)[None, :]
    return (j < prefix_len) | (j <= i)


def combine_masks(structure: Optional[torch.Tensor], key_padding: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    padding = key_padding_to_mask(key_padding)
    if structure is None:
        return padding
    structure = structure[None, None]
    return structure if padding is None else structure & padding


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """(B,) scalars in [0, 1] -> (B, dim) sinusoidal features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = 1000.0 * t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
