"""Temporal knowledge compensator.

A pooled temporal-attribute vector is added to every frame feature, the
frames then cross-attend to the individual temporal attributes (the T x L
attention map is exposed for reporting), and a small transformer block over
the frame axis models inter-frame relations on top of learned positional
encodings.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import TkcConfig
from .skc import residual_cross_attention


def pool_temporal_attributes(attrs: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Collapse (..., L, C) attribute features into one global vector (..., C)."""
    if mode == "mean":
        return attrs.mean(dim=-2)
    if mode == "max":
        return attrs.max(dim=-2).values
    raise ValueError(f"unknown pooling {mode!r}")


def fuse_global(frames: torch.Tensor, global_vec: torch.Tensor) -> torch.Tensor:
    """Add the global semantic vector to every frame row."""
    return frames + global_vec.unsqueeze(-2)


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: self-attention and feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, ff_expansion: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("feature_dim must be divisible by tkc.heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_expansion * dim),
            nn.GELU(),
            nn.Linear(ff_expansion * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attended = residual_cross_attention(
            self.q(h), self.k(h), self.v(h), heads=self.heads, scaled=True,
            residual=torch.zeros_like(h))
        x = x + self.out(attended)
        return x + self.ff(self.norm2(x))


class TemporalKnowledgeCompensator(nn.Module):
    """Turns frame features (T, C) plus temporal attributes (L, C) into
    frame-level prototypes (T, C)."""

    def __init__(self, cfg: TkcConfig, feature_dim: int, frames: int):
        super().__init__()
        self.cfg = cfg
        c = feature_dim
        self.attr_k = nn.Linear(c, c)
        self.attr_v = nn.Linear(c, c)
        self.pos_embed = nn.Parameter(torch.empty(frames, c))
        self.blocks = nn.ModuleList(
            TransformerBlock(c, cfg.heads, cfg.ff_expansion)
            for _ in range(cfg.blocks))
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.pos_embed, std=0.02)
        for lin in (self.attr_k, self.attr_v):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)
        for block in self.blocks:
            for lin in (block.q, block.k, block.v, block.out,
                        block.ff[0], block.ff[2]):
                nn.init.normal_(lin.weight, std=0.02)
                nn.init.zeros_(lin.bias)

    def inject_temporal_attributes(self, frames: torch.Tensor, attrs: torch.Tensor,
                                   return_attention: bool = False):
        """Frames cross-attend to temporal attributes; residual output.

        With ``return_attention`` the (..., T, L) softmax weights are returned
        alongside, row-normalized over the L attributes.
        """
        return residual_cross_attention(
            frames, self.attr_k(attrs), self.attr_v(attrs), heads=1,
            scaled=True, return_attention=return_attention)

    def temporal_transformer(self, frames: torch.Tensor) -> torch.Tensor:
        """Positional encodings plus the encoder block(s) over the frame axis."""
        x = frames + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, frames: torch.Tensor, attrs: torch.Tensor,
                return_attention: bool = False):
        """frames (..., T, C), attrs (..., L, C) -> prototypes (..., T, C)."""
        fused = fuse_global(frames, pool_temporal_attributes(attrs, self.cfg.pool))
        injected, attention = self.inject_temporal_attributes(
            fused, attrs, return_attention=True)
        out = self.temporal_transformer(injected)
        if return_attention:
            return out, attention
        return out
