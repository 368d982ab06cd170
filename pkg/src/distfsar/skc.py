"""Spatial knowledge compensator.

Learnable object-level prototypes first interact through self-attention,
then aggregate each frame's patch tokens by cross-attention (queries are the
prototypes themselves), and finally absorb spatial attribute features the
same way. Every step is residual, and the same parameters are applied to
every frame.
"""
from __future__ import annotations

import torch
from torch import nn

from .config import SkcConfig


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, heads, c // heads)
    return x.transpose(-2, -3)  # (..., heads, n, head_dim)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-2, -3)
    *lead, n, heads, hd = x.shape
    return x.reshape(*lead, n, heads * hd)


def residual_cross_attention(queries: torch.Tensor, keys: torch.Tensor,
                             values: torch.Tensor, heads: int = 1,
                             scaled: bool = True, residual: torch.Tensor | None = None,
                             return_attention: bool = False):
    """softmax(Q K^T) V + residual, with optional multi-head split and logit
    scaling. The residual defaults to the query tensor; no output projection
    is applied."""
    if residual is None:
        residual = queries
    q = _split_heads(queries, heads)
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    logits = q @ k.transpose(-1, -2)
    if scaled:
        logits = logits / (q.shape[-1] ** 0.5)
    attn = torch.softmax(logits, dim=-1)
    out = _merge_heads(attn @ v) + residual
    if return_attention:
        return out, attn.mean(dim=-3) if heads > 1 else attn.squeeze(-3)
    return out


class SpatialKnowledgeCompensator(nn.Module):
    """Turns patch tokens (T, P, C) plus spatial attributes (G, C) into
    object prototypes (T, N, C)."""

    def __init__(self, cfg: SkcConfig, feature_dim: int):
        super().__init__()
        if feature_dim % cfg.heads != 0:
            raise ValueError("feature_dim must be divisible by skc.heads")
        self.cfg = cfg
        c = feature_dim
        self.prototypes = nn.Parameter(torch.empty(cfg.num_prototypes, c))
        self.self_q = nn.Linear(c, c)
        self.self_k = nn.Linear(c, c)
        self.self_v = nn.Linear(c, c)
        self.patch_k = nn.Linear(c, c)
        self.patch_v = nn.Linear(c, c)
        self.attr_k = nn.Linear(c, c)
        self.attr_v = nn.Linear(c, c)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.prototypes, std=0.02)
        for lin in (self.self_q, self.self_k, self.self_v, self.patch_k,
                    self.patch_v, self.attr_k, self.attr_v):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)

    @property
    def _scaled(self) -> bool:
        return not self.cfg.literal_unscaled

    def prototype_self_attention(self, protos: torch.Tensor) -> torch.Tensor:
        """Prototypes exchange information with each other; residual output."""
        return residual_cross_attention(
            self.self_q(protos), self.self_k(protos), self.self_v(protos),
            heads=self.cfg.heads, scaled=self._scaled, residual=protos)

    def patch_aggregate(self, protos: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
        """Prototypes (raw queries) aggregate one frame's patch tokens."""
        return residual_cross_attention(
            protos, self.patch_k(patches), self.patch_v(patches),
            heads=self.cfg.heads, scaled=self._scaled)

    def inject_spatial_attributes(self, protos: torch.Tensor,
                                  attrs: torch.Tensor) -> torch.Tensor:
        """Prototypes absorb spatial attribute features; residual output."""
        return residual_cross_attention(
            protos, self.attr_k(attrs), self.attr_v(attrs),
            heads=self.cfg.heads, scaled=self._scaled)

    def forward(self, patches: torch.Tensor, attrs: torch.Tensor) -> torch.Tensor:
        """patches (..., T, P, C), attrs (..., G, C) -> prototypes (..., T, N, C)."""
        protos = self.prototype_self_attention(self.prototypes)
        protos = protos.expand(*patches.shape[:-2], *protos.shape)
        aggregated = self.patch_aggregate(protos, patches)
        if attrs.dim() < patches.dim():
            attrs = attrs.unsqueeze(-3)  # share attributes across the frame axis
        return self.inject_spatial_attributes(aggregated, attrs.expand(
            *aggregated.shape[:-2], *attrs.shape[-2:]))
