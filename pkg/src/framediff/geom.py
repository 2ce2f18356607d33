"""Geometry kernel: orthonormal frames, rotations, SO(3) distances, CoM handling.

Everything here works on float64 torch tensors with arbitrary leading batch
dimensions. A frame is a 3x3 matrix whose columns are the basis vectors
``u1, u2, u3``; it always has determinant +1.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from scipy.spatial.transform import Rotation

DTYPE = torch.float64
DEGENERATE_EPS = 1e-8


class DegenerateFrameError(ValueError):
    """Raised when two vectors cannot span an orthonormal frame."""


class EmptyMoleculeError(ValueError):
    """Raised when a mask selects no atoms."""


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def _gram_schmidt_parts(v1: torch.Tensor, v2: torch.Tensor):
    n1 = v1.norm(dim=-1, keepdim=True)
    u1 = v1 / n1.clamp_min(DEGENERATE_EPS)
    w2 = v2 - (v2 * u1).sum(-1, keepdim=True) * u1
    n2 = w2.norm(dim=-1, keepdim=True)
    u2 = w2 / n2.clamp_min(DEGENERATE_EPS)
    u3 = torch.linalg.cross(u1, u2, dim=-1)
    frame = torch.stack([u1, u2, u3], dim=-1)
    degenerate = (n1[..., 0] < DEGENERATE_EPS) | (n2[..., 0] < DEGENERATE_EPS)
    return frame, degenerate


def gram_schmidt(v1, v2) -> torch.Tensor:
    """Orthonormal right-handed frame with first axis along ``v1``.

    Raises DegenerateFrameError if ``v1`` vanishes or ``v2`` is (numerically)
    parallel to it, for any element of the batch.
    """
    frame, degenerate = _gram_schmidt_parts(as_tensor(v1), as_tensor(v2))
    if bool(degenerate.any()):
        raise DegenerateFrameError("gram_schmidt: inputs do not span a plane")
    return frame


def gram_schmidt_or_identity(v1: torch.Tensor, v2: torch.Tensor):
    """Batched Gram-Schmidt that substitutes the identity on degenerate inputs.

    Returns ``(frames, flags)`` where ``flags`` marks the replaced entries.
    Gradients through replaced entries are zero, never NaN.
    """
    frame, degenerate = _gram_schmidt_parts(v1, v2)
    eye = torch.eye(3, dtype=frame.dtype, device=frame.device).expand_as(frame)
    frame = torch.where(degenerate[..., None, None], eye, frame)
    return frame, degenerate


def relative_rotation(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a.transpose(-1, -2) @ b


def geodesic_angle(a, b) -> torch.Tensor:
    """Geodesic distance on SO(3) between frames ``a`` and ``b`` in radians.

    Uses the atan2 form, which stays well conditioned near 0 and pi. For a
    rotation by theta, R - R^T has Frobenius norm 2*sqrt(2)*sin(theta).
    """
    r = relative_rotation(as_tensor(a), as_tensor(b))
    tr = r.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = (0.5 * (tr - 1.0)).clamp(-1.0, 1.0)
    skew = r - r.transpose(-1, -2)
    sq = (skew**2).sum((-1, -2))
    pos = sq > 0
    # exact zero at sin = 0 with a finite (zero) gradient there
    sin = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq)) / (2.0 * math.sqrt(2.0))
    return torch.atan2(sin.clamp_min(0.0), cos)


def remove_com(coords, mask=None) -> torch.Tensor:
    """Subtract the mean over unmasked atoms and zero masked rows.

    ``coords`` is ``(..., N, 3)``; ``mask`` is ``(..., N)`` boolean.
    """
    x = as_tensor(coords)
    if mask is None:
        mask = torch.ones(x.shape[:-1], dtype=torch.bool)
    m = torch.as_tensor(mask, dtype=torch.bool)
    count = m.sum(-1, keepdim=True)
    if bool((count == 0).any()):
        raise EmptyMoleculeError("remove_com: mask selects no atoms")
    w = m[..., None].to(x.dtype)
    mean = (x * w).sum(-2, keepdim=True) / count[..., None].to(x.dtype)
    return (x - mean) * w


def com(coords: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask[..., None].to(coords.dtype)
    return (coords * w).sum(-2) / mask.sum(-1, keepdim=True).clamp_min(1).to(coords.dtype)


def apply_frame(frame, coords) -> torch.Tensor:
    """Express coordinates in ``frame``: x -> O^T x (row-vector convention).

    ``frame`` is ``(..., 3, 3)`` and broadcasts against ``coords`` ``(..., 3)``.
    """
    o = as_tensor(frame)
    x = as_tensor(coords)
    return (o.transpose(-1, -2) @ x[..., None])[..., 0]


def invert_frame(frame, coords) -> torch.Tensor:
    """Map frame-local coordinates back: y -> O y."""
    o = as_tensor(frame)
    y = as_tensor(coords)
    return (o @ y[..., None])[..., 0]


def rotate(coords, rotation) -> torch.Tensor:
    """Apply one rotation to every row vector of ``coords``."""
    return as_tensor(coords) @ as_tensor(rotation).transpose(-1, -2)


def random_rotation(seed) -> torch.Tensor:
    """Haar-uniform rotation matrix, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return as_tensor(Rotation.random(random_state=rng).as_matrix())


def rot_z(angle: float) -> torch.Tensor:
    c, s = math.cos(angle), math.sin(angle)
    return as_tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def frame_errors(frame: torch.Tensor) -> dict[str, float]:
    """Max deviation from orthonormality and from det = +1."""
    o = as_tensor(frame)
    eye = torch.eye(3, dtype=DTYPE)
    return {
        "orthonormal": float((o.transpose(-1, -2) @ o - eye).abs().max()),
        "det": float((torch.linalg.det(o) - 1.0).abs().max()),
    }
