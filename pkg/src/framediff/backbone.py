"""Transformer denoiser over atom tokens with distance-biased attention.

No positional encodings: tokens are a set, so the network is permutation
equivariant. The ``edge`` variant adds an RBF distance bias to every attention
logit; ``plain`` omits it.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .geom import DTYPE

MASK_BIAS = -1e9
RBF_MAX = 5.0


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding, interleaved as [sin f0 t, cos f0 t, sin f1 t, ...].

    Frequencies run geometrically from 1 down to 1e-4 (periods 1..1e4).
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=DTYPE)
    half = dim // 2
    freqs = torch.exp(-math.log(1e4) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
    args = t[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def rbf_features(dist: torch.Tensor, k: int = 16, max_dist: float = RBF_MAX) -> torch.Tensor:
    centers = torch.linspace(0.0, max_dist, k, dtype=dist.dtype)
    width = max_dist / (k - 1)
    return torch.exp(-0.5 * ((dist[..., None] - centers) / width) ** 2)


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    d2 = ((x[..., :, None, :] - x[..., None, :, :]) ** 2).sum(-1)
    pos = d2 > 0
    # zero distance on the diagonal without a NaN gradient
    return torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))


def edge_bias(coords: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Scalar attention bias ``w . RBF(|x_i - x_j|)`` with masked keys at -1e9.

    ``coords`` (..., N, 3), ``mask`` (..., N), ``weight`` (K,). Returns (..., N, N).
    """
    feats = rbf_features(pairwise_distances(coords), k=weight.shape[-1])
    bias = feats @ weight
    return bias.masked_fill(~mask[..., None, :], MASK_BIAS)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class EdgeAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.bias_scale = nn.Parameter(torch.ones(heads, dtype=DTYPE))

    def forward(self, x, bias):
        b, n, w = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(w // self.heads)
        # bias already carries -1e9 on masked keys; head scales act only on live pairs
        live = bias > MASK_BIAS / 2
        scaled = torch.where(live[:, None], bias[:, None] * self.bias_scale[None, :, None, None], bias[:, None])
        attn = torch.softmax(logits + scaled, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, w)
        return self.proj(out)


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = EdgeAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))

    def forward(self, x, c, bias):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        x = x + gate1[:, None] * self.attn(modulate(self.norm1(x), shift1, scale1), bias)
        x = x + gate2[:, None] * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class EdgeDiT(nn.Module):
    """phi_theta: (projected coords, features, t) -> per-atom noise prediction."""

    def __init__(self, feature_dim: int, width: int = 128, depth: int = 4, heads: int = 4,
                 num_rbf: int = 16, variant: str = "edge"):
        super().__init__()
        if variant not in ("edge", "plain"):
            raise ValueError(f"unknown backbone variant {variant!r}")
        self.variant = variant
        self.width = width
        self.io_dim = 3 + feature_dim
        self.embed = nn.Linear(self.io_dim, width)
        self.t_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.rbf_weight = nn.Parameter(torch.randn(num_rbf, dtype=DTYPE) / math.sqrt(num_rbf))
        self.blocks = nn.ModuleList(DiTBlock(width, heads) for _ in range(depth))
        self.norm_out = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.head = nn.Linear(width, self.io_dim)
        self.to(DTYPE)

    def attention_bias(self, coords, mask):
        if self.variant == "edge":
            return edge_bias(coords, mask, self.rbf_weight)
        zeros = torch.zeros(coords.shape[:-1] + (coords.shape[-2],), dtype=coords.dtype)
        return zeros.masked_fill(~mask[..., None, :], MASK_BIAS)

    def forward(self, tokens: torch.Tensor, t: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``tokens`` (B, N, 3 + F); ``t`` (B,) integer steps; returns (B, N, 3 + F)."""
        w = mask[..., None].to(tokens.dtype)
        tokens = tokens * w
        c = self.t_mlp(timestep_embedding(t, self.width))
        bias = self.attention_bias(tokens[..., :3], mask)
        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x, c, bias)
        shift, scale = self.ada_out(c).chunk(2, dim=-1)
        out = self.head(modulate(self.norm_out(x), shift, scale))
        return out * w
