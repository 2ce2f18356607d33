"""Variance-preserving diffusion on the zero-CoM subspace with frame projections.

Three ways to make a non-equivariant backbone equivariant:

* ``gfd``: one pooled frame per molecule, recomputed from ``z_t`` every step;
* ``lfd`` / ``lfd-aligned``: one frame per atom, optionally pulled towards the
  pooled frame by a geodesic alignment penalty;
* ``ifd``: the clean molecule is canonicalised once, then diffusion runs
  directly in the canonical pose with no frames in the loop.

Frames act on the coordinate block only; features pass through untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import EdgeDiT
from .equinet import MCEquiNet, node_frames, pool_frames
from .geom import DTYPE, apply_frame, geodesic_angle, invert_frame, remove_com
from .molkit import FEATURE_DIM, MolBatch

PARADIGMS = ("gfd", "lfd", "lfd-aligned", "ifd")


class InvalidTError(ValueError):
    pass


class NumericalUnderflowError(FloatingPointError):
    pass


# --- schedule --------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    alpha: torch.Tensor  # (T + 1,)
    sigma: torch.Tensor  # (T + 1,)

    def alpha_ts(self, t, s):
        return self.alpha[t] / self.alpha[s]

    def sigma2_ts(self, t, s):
        # 1 - alpha_{t|s}^2 equals sigma_t^2 - alpha_{t|s}^2 sigma_s^2 for a VP schedule
        return -torch.expm1(2.0 * torch.log(self.alpha_ts(t, s)))

    def sigma_t_to_s(self, t, s):
        return torch.sqrt(self.sigma2_ts(t, s)) * self.sigma[s] / self.sigma[t]

    def snr(self, t):
        return self.alpha[t] ** 2 / self.sigma[t] ** 2


def build_schedule(T: int, kind: str = "polynomial", precision: float = 1e-5, power: float = 2.0) -> NoiseSchedule:
    """Polynomial VP schedule: alpha_t^2 = (1 - 2s) f(t) + s with f = (1 - (t/T)^p)^2.

    ``f`` is first clipped so that consecutive ratios never drop below 1e-3,
    which keeps the first reverse steps well conditioned.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidTError(f"T must be a positive integer, got {T!r}")
    if kind != "polynomial":
        raise ValueError(f"unknown schedule kind {kind!r}")
    steps = np.linspace(0, T, T + 1, dtype=np.float64)
    f = (1.0 - (steps / T) ** power) ** 2
    f = np.concatenate([[1.0], f])
    ratio = np.clip(f[1:] / f[:-1], 1e-3, 1.0)
    f = np.cumprod(ratio)
    alpha2 = (1.0 - 2.0 * precision) * f + precision
    alpha = np.sqrt(alpha2)
    sigma = np.sqrt(1.0 - alpha2)
    return NoiseSchedule(int(T), torch.as_tensor(alpha, dtype=DTYPE), torch.as_tensor(sigma, dtype=DTYPE))


# --- noise and steps ---------------------------------------------------------

def zero_com_noise(mask: torch.Tensor, feature_dim: int = FEATURE_DIM, generator: torch.Generator | None = None) -> torch.Tensor:
    """Standard normal joint noise with the coordinate block projected to zero CoM."""
    shape = tuple(mask.shape) + (3 + feature_dim,)
    eps = torch.randn(shape, dtype=DTYPE, generator=generator)
    w = mask[..., None].to(DTYPE)
    return torch.cat([remove_com(eps[..., :3], mask), eps[..., 3:] * w], dim=-1)


def sample_zero_com_noise(n: int, feature_dim: int = FEATURE_DIM, seed: int = 0) -> torch.Tensor:
    if n < 1:
        raise ValueError("n must be >= 1")
    g = torch.Generator().manual_seed(int(seed))
    return zero_com_noise(torch.ones(n, dtype=torch.bool), feature_dim, g)


def _per_item(v: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return v.reshape(v.shape + (1,) * (z.dim() - v.dim()))


def forward_noise(m: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = alpha_t m + sigma_t eps; ``t`` is a scalar or one step per batch item."""
    t = torch.as_tensor(t)
    a = _per_item(schedule.alpha[t], m) if t.dim() else schedule.alpha[t]
    s = _per_item(schedule.sigma[t], m) if t.dim() else schedule.sigma[t]
    return a * m + s * eps


def reverse_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule,
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """One ancestral step t -> t - 1; ``noise=None`` means the deterministic final step."""
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise InvalidTError(f"t must lie in [1, {schedule.T}], got {t}")
    s = t - 1
    if float(schedule.sigma[t]) < 1e-12:
        raise NumericalUnderflowError(f"sigma_{t} below 1e-12")
    a_ts = schedule.alpha_ts(t, s)
    s2_ts = schedule.sigma2_ts(t, s)
    z = z_t / a_ts - (s2_ts / (a_ts * schedule.sigma[t])) * eps_hat
    if noise is not None:
        z = z + schedule.sigma_t_to_s(t, s) * noise
    return z


# --- model -------------------------------------------------------------------

@dataclass
class LossBreakdown:
    diff_loss: torch.Tensor
    align_loss: torch.Tensor
    total: torch.Tensor
    lam: float
    degenerate: int = 0


@dataclass
class FrameInfo:
    node_frames: torch.Tensor | None = None
    node_flags: torch.Tensor | None = None
    global_frame: torch.Tensor | None = None
    global_flags: torch.Tensor | None = None

    def degenerate_count(self) -> int:
        n = 0
        if self.global_flags is not None:
            n += int(self.global_flags.sum())
        if self.node_flags is not None and self.global_flags is None:
            n += int(self.node_flags.sum())
        return n


class FrameDiffusionModel(nn.Module):
    """Frame constructor phi_e plus backbone phi_theta for one paradigm."""

    def __init__(self, paradigm: str = "gfd", feature_dim: int = FEATURE_DIM, *,
                 egnn_hidden: int = 64, egnn_channels: int = 7, egnn_layers: int = 3,
                 width: int = 128, depth: int = 4, heads: int = 4, backbone: str = "edge",
                 align_weight: float = 0.1):
        super().__init__()
        if paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {paradigm!r}")
        if align_weight < 0:
            raise ValueError("align_weight must be >= 0")
        self.paradigm = paradigm
        self.feature_dim = feature_dim
        self.align_weight = align_weight if paradigm == "lfd-aligned" else 0.0
        self.equinet = MCEquiNet(feature_dim, egnn_hidden, egnn_channels, egnn_layers)
        self.backbone = EdgeDiT(feature_dim, width, depth, heads, variant=backbone)

    @property
    def frame_calls(self) -> int:
        return self.equinet.calls

    def frames(self, z: torch.Tensor, mask: torch.Tensor) -> FrameInfo:
        state = self.equinet(z[..., :3], z[..., 3:], mask)
        nf, nflags = node_frames(state)
        gf, gflags = pool_frames(nf, nflags, mask)
        return FrameInfo(nf, nflags, gf, gflags)

    def predict_noise(self, z: torch.Tensor, t: torch.Tensor, mask: torch.Tensor):
        """Equivariant noise prediction ``eps_hat`` for centred ``z``; returns (eps_hat, FrameInfo)."""
        if self.paradigm == "ifd":
            return predict_plain(self.backbone, z, t, mask), FrameInfo()
        info = self.frames(z, mask)
        if self.paradigm == "gfd":
            eps = predict_global(self.backbone, z, t, mask, info.global_frame)
        else:
            eps = predict_local(self.backbone, z, t, mask, info.node_frames)
        return eps, info


def _finish(out: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask[..., None].to(out.dtype)
    return torch.cat([remove_com(out[..., :3], mask), out[..., 3:] * w], dim=-1)


def predict_plain(backbone: EdgeDiT, z, t, mask):
    return _finish(backbone(z, t, mask), mask)


def predict_global(backbone: EdgeDiT, z, t, mask, frame):
    """Project coordinates into one frame per molecule, predict, map back."""
    o = frame[:, None]
    tokens = torch.cat([apply_frame(o, z[..., :3]), z[..., 3:]], dim=-1)
    y = backbone(tokens, t, mask)
    return _finish(torch.cat([invert_frame(o, y[..., :3]), y[..., 3:]], dim=-1), mask)


def predict_local(backbone: EdgeDiT, z, t, mask, frames):
    """Same as :func:`predict_global` with a separate frame for every atom."""
    tokens = torch.cat([apply_frame(frames, z[..., :3]), z[..., 3:]], dim=-1)
    y = backbone(tokens, t, mask)
    return _finish(torch.cat([invert_frame(frames, y[..., :3]), y[..., 3:]], dim=-1), mask)


def alignment_loss(frames, global_frame, mask=None) -> torch.Tensor:
    """Mean over atoms of geodesic_angle(O_i, O_g) / pi.

    ``frames`` (..., N, 3, 3) and ``global_frame`` (..., 3, 3). With a batch
    dimension and a mask the mean is over unmasked atoms of each molecule and
    the result has one entry per molecule.
    """
    frames = torch.as_tensor(frames, dtype=DTYPE)
    global_frame = torch.as_tensor(global_frame, dtype=DTYPE)
    theta = geodesic_angle(frames, global_frame[..., None, :, :]) / math.pi
    if mask is None:
        return theta.mean(-1)
    w = mask.to(DTYPE)
    return (theta * w).sum(-1) / w.sum(-1)


def masked_mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask[..., None].to(a.dtype)
    return (((a - b) ** 2) * w).sum() / (w.sum() * a.shape[-1])


def draw_t_eps(batch: MolBatch, schedule: NoiseSchedule, generator, t=None, eps=None):
    b = len(batch)
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    else:
        t = torch.as_tensor(t).expand(b) if torch.as_tensor(t).dim() == 0 else torch.as_tensor(t)
    if eps is None:
        eps = zero_com_noise(batch.mask, batch.h.shape[-1], generator)
    return t, eps


def gfd_training_loss(model: FrameDiffusionModel, batch: MolBatch, schedule: NoiseSchedule,
                      generator: torch.Generator | None = None, t=None, eps=None) -> LossBreakdown:
    t, eps = draw_t_eps(batch, schedule, generator, t, eps)
    z = forward_noise(batch.z, t, eps, schedule)
    info = model.frames(z, batch.mask)
    eps_hat = predict_global(model.backbone, z, t, batch.mask, info.global_frame)
    diff = masked_mse(eps, eps_hat, batch.mask)
    zero = torch.zeros((), dtype=DTYPE)
    return LossBreakdown(diff, zero, diff, 0.0, int(info.global_flags.sum()))


def lfd_training_loss(model: FrameDiffusionModel, batch: MolBatch, schedule: NoiseSchedule,
                      lam: float | None = None, generator: torch.Generator | None = None,
                      t=None, eps=None) -> LossBreakdown:
    lam = model.align_weight if lam is None else lam
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    t, eps = draw_t_eps(batch, schedule, generator, t, eps)
    z = forward_noise(batch.z, t, eps, schedule)
    info = model.frames(z, batch.mask)
    eps_hat = predict_local(model.backbone, z, t, batch.mask, info.node_frames)
    diff = masked_mse(eps, eps_hat, batch.mask)
    align = alignment_loss(info.node_frames, info.global_frame, batch.mask).mean()
    return LossBreakdown(diff, align, diff + lam * align, lam, int((info.node_flags & batch.mask).sum()))


def ifd_canonicalize(model: FrameDiffusionModel, batch: MolBatch):
    """Rotate each clean molecule into its pooled frame. Returns (batch, flags)."""
    batch = batch.centered()
    state = model.equinet(batch.x, batch.h, batch.mask)
    nf, nflags = node_frames(state)
    o, flags = pool_frames(nf, nflags, batch.mask)
    x = apply_frame(o[:, None], batch.x) * batch.mask[..., None].to(DTYPE)
    return MolBatch(x, batch.h, batch.mask), flags


def ifd_training_loss(model: FrameDiffusionModel, canonical: MolBatch, schedule: NoiseSchedule,
                      generator: torch.Generator | None = None, t=None, eps=None) -> LossBreakdown:
    t, eps = draw_t_eps(canonical, schedule, generator, t, eps)
    z = forward_noise(canonical.z, t, eps, schedule)
    eps_hat = predict_plain(model.backbone, z, t, canonical.mask)
    diff = masked_mse(eps, eps_hat, canonical.mask)
    zero = torch.zeros((), dtype=DTYPE)
    return LossBreakdown(diff, zero, diff, 0.0)


def training_loss(model: FrameDiffusionModel, batch: MolBatch, schedule: NoiseSchedule,
                  generator: torch.Generator | None = None, t=None, eps=None) -> LossBreakdown:
    """Paradigm dispatch. For ``ifd`` the batch must already be canonical."""
    if model.paradigm == "gfd":
        return gfd_training_loss(model, batch, schedule, generator, t, eps)
    if model.paradigm in ("lfd", "lfd-aligned"):
        return lfd_training_loss(model, batch, schedule, model.align_weight, generator, t, eps)
    return ifd_training_loss(model, batch, schedule, generator, t, eps)


# --- sampling ------------------------------------------------------------------

@dataclass
class SampleResult:
    batch: MolBatch
    frame_calls: int
    seconds: float
    degenerate_steps: int
    com_drift: list[float] = field(default_factory=list)


def atom_mask(counts) -> torch.Tensor:
    counts = torch.as_tensor(np.asarray(counts), dtype=torch.long)
    n_max = int(counts.max())
    return torch.arange(n_max)[None, :] < counts[:, None]


@torch.no_grad()
def sample(model: FrameDiffusionModel, schedule: NoiseSchedule, counts, seed: int = 0,
           track_com: bool = False) -> SampleResult:
    """Ancestral sampling of ``len(counts)`` molecules, one trajectory per batch.

    ``frame_calls`` counts frame-constructor invocations along the trajectory:
    ``T`` for frame-in-the-loop paradigms and 0 for ``ifd``.
    """
    import time

    start = time.perf_counter()
    calls_before = model.frame_calls
    g = torch.Generator().manual_seed(int(seed))
    mask = atom_mask(counts)
    b = mask.shape[0]
    z = zero_com_noise(mask, model.feature_dim, g)
    degenerate = 0
    drift = []
    for t in range(schedule.T, 0, -1):
        tt = torch.full((b,), t, dtype=torch.long)
        eps_hat, info = model.predict_noise(z, tt, mask)
        degenerate += info.degenerate_count()
        noise = zero_com_noise(mask, model.feature_dim, g) if t > 1 else None
        z = reverse_step(z, eps_hat, t, schedule, noise)
        if track_com:
            drift.append(float(_com_norm(z[..., :3], mask).max()))
    out = MolBatch.from_z(z, mask)
    out = MolBatch(remove_com(out.x, mask), out.h, mask)
    return SampleResult(out, model.frame_calls - calls_before, time.perf_counter() - start, degenerate, drift)


def _com_norm(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask[..., None].to(x.dtype)
    return ((x * w).sum(-2) / w.sum(-2)).norm(dim=-1)
