"""Multi-channel equivariant message passing used as the frame constructor.

Each node carries ``C`` coordinate channels and a scalar state. Messages see
only invariants (scalar states and per-channel squared distances); coordinate
channels are updated along relative vectors and linearly mixed across
channels, so every channel rotates with the input.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geom import DTYPE, EmptyMoleculeError, gram_schmidt_or_identity


@dataclass
class ChannelState:
    channels: torch.Tensor  # (B, N, C, 3)
    scalars: torch.Tensor  # (B, N, D)
    mask: torch.Tensor  # (B, N)


class MCEquivariantLayer(nn.Module):
    def __init__(self, hidden: int, channels: int):
        super().__init__()
        self.edge_mlp = nn.Sequential(
            nn.Linear(2 * hidden + channels, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU()
        )
        self.node_mlp = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.coord_gate = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, channels))
        self.mix = nn.Parameter(torch.eye(channels, dtype=DTYPE))

    def forward(self, x, h, pair_mask):
        # x: (B, N, C, 3), h: (B, N, D), pair_mask: (B, N, N)
        n = h.shape[1]
        diff = x[:, :, None] - x[:, None, :]  # (B, N, N, C, 3)
        d2 = (diff**2).sum(-1)  # (B, N, N, C)
        hi = h[:, :, None].expand(-1, -1, n, -1)
        hj = h[:, None, :].expand(-1, n, -1, -1)
        m = self.edge_mlp(torch.cat([hi, hj, d2], dim=-1))
        pm = pair_mask[..., None].to(h.dtype)
        m = m * pm
        h = h + self.node_mlp(torch.cat([h, m.sum(2)], dim=-1))
        gate = self.coord_gate(m) * pm  # (B, N, N, C)
        unit = diff / (torch.sqrt(d2 + 1e-8) + 1.0)[..., None]
        x = x + (unit * gate[..., None]).sum(2)
        x = torch.einsum("cd,bndk->bnck", self.mix, x)
        return x, h


class MCEquiNet(nn.Module):
    """Frame constructor: molecule (x, h, mask) -> coordinate channels per node."""

    def __init__(self, feature_dim: int, hidden: int = 64, channels: int = 7, layers: int = 3):
        super().__init__()
        if channels < 2:
            raise ValueError("need at least two coordinate channels for a frame")
        self.channels = channels
        self.embed = nn.Linear(feature_dim, hidden)
        self.channel_scale = nn.Parameter(torch.linspace(1.0, 0.4, channels, dtype=DTYPE))
        self.layers = nn.ModuleList(MCEquivariantLayer(hidden, channels) for _ in range(layers))
        self.to(DTYPE)
        self.calls = 0

    def forward(self, x: torch.Tensor, h: torch.Tensor, mask: torch.Tensor) -> ChannelState:
        """``x`` must already be centred over unmasked atoms."""
        self.calls += 1
        w = mask[..., None].to(x.dtype)
        n = mask.shape[-1]
        eye = torch.eye(n, dtype=torch.bool, device=mask.device)
        pair = mask[:, :, None] & mask[:, None, :] & ~eye
        xc = x[:, :, None, :] * self.channel_scale[None, None, :, None]
        s = self.embed(h) * w
        for layer in self.layers:
            xc, s = layer(xc, s, pair)
            s = s * w
        xc = xc * w[..., None]
        return ChannelState(xc, s, mask)


def node_frames(state: ChannelState):
    """Per-node Gram-Schmidt frames from channels 0 and 1 with identity fallback."""
    ch = state.channels
    frames, flags = gram_schmidt_or_identity(ch[..., 0, :], ch[..., 1, :])
    return frames, flags


def pool_frames(frames: torch.Tensor, flags: torch.Tensor, mask: torch.Tensor):
    """Mean of valid node frames, re-orthonormalised from its first two columns."""
    if bool((mask.sum(-1) == 0).any()):
        raise EmptyMoleculeError("global_frame: no unmasked atoms")
    valid = mask & ~flags
    w = valid[..., None, None].to(frames.dtype)
    count = valid.sum(-1).to(frames.dtype).clamp_min(1.0)
    mean = (frames * w).sum(-3) / count[..., None, None]
    pooled, degenerate = gram_schmidt_or_identity(mean[..., :, 0], mean[..., :, 1])
    return pooled, degenerate | (valid.sum(-1) == 0)


def global_frame(state: ChannelState, mask: torch.Tensor | None = None):
    if mask is None:
        mask = state.mask
    frames, flags = node_frames(state)
    return pool_frames(frames, flags, mask)
