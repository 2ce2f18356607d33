import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from framediff.geom import (
    DegenerateFrameError, EmptyMoleculeError, apply_frame, frame_errors, geodesic_angle, gram_schmidt,
    gram_schmidt_or_identity, invert_frame, random_rotation, remove_com, rot_z,
)

EYE = torch.eye(3, dtype=torch.float64)
vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


def test_gram_schmidt_examples():
    assert torch.equal(gram_schmidt([1, 0, 0], [0, 1, 0]), EYE)
    # u1 = (1,0,0); v2 - (v2.u1)u1 = (0,1,0)
    assert torch.allclose(gram_schmidt([2, 0, 0], [1, 1, 0]), EYE, atol=0, rtol=0)
    with pytest.raises(DegenerateFrameError):
        gram_schmidt([1, 0, 0], [2, 0, 0])
    with pytest.raises(DegenerateFrameError):
        gram_schmidt([0, 0, 0], [0, 1, 0])


def test_gram_schmidt_fallback_flags():
    v1 = torch.tensor([[1.0, 0, 0], [1.0, 0, 0]])
    v2 = torch.tensor([[0.0, 3, 0], [5.0, 0, 0]])
    frames, flags = gram_schmidt_or_identity(v1, v2)
    assert flags.tolist() == [False, True]
    assert torch.equal(frames[1], EYE)


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.integers(0, 2**32 - 1))
def test_gram_schmidt_equivariant(v1, v2, seed):
    v1, v2 = torch.tensor(v1), torch.tensor(v2)
    u1 = v1 / v1.norm() if v1.norm() > 1e-3 else None
    if u1 is None or (v2 - (v2 @ u1) * u1).norm() < 1e-3:
        return
    r = random_rotation(seed)
    f = gram_schmidt(v1, v2)
    assert max(frame_errors(f).values()) < 1e-10
    assert (gram_schmidt(r @ v1, r @ v2) - r @ f).abs().max() < 1e-10


def test_geodesic_closed_forms():
    assert float(geodesic_angle(EYE, EYE)) == 0.0
    assert abs(float(geodesic_angle(EYE, rot_z(math.pi / 2))) - math.pi / 2) < 1e-12
    assert abs(float(geodesic_angle(EYE, rot_z(math.pi))) - math.pi) < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_geodesic_symmetric_and_left_invariant(sa, sb, sr):
    a, b, r = random_rotation(sa), random_rotation(sb), random_rotation(sr)
    d = float(geodesic_angle(a, b))
    assert 0.0 <= d <= math.pi
    assert abs(d - float(geodesic_angle(b, a))) < 1e-10
    assert abs(d - float(geodesic_angle(r @ a, r @ b))) < 1e-10


def test_geodesic_matches_rotation_angle():
    for theta in np.linspace(0.0, math.pi, 9):
        assert abs(float(geodesic_angle(EYE, rot_z(theta))) - theta) < 1e-10


def test_remove_com_examples():
    x = remove_com([[-1, 0, 0], [1, 0, 0]])
    assert torch.equal(x, torch.tensor([[-1.0, 0, 0], [1.0, 0, 0]]))
    assert torch.equal(remove_com([[1, 1, 1], [3, 3, 3]]), torch.tensor([[-1.0, -1, -1], [1.0, 1, 1]]))
    x = remove_com([[0, 0, 0], [2, 0, 0], [99, 99, 99]], [True, True, False])
    assert torch.equal(x, torch.tensor([[-1.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]]))
    with pytest.raises(EmptyMoleculeError):
        remove_com([[1, 2, 3]], [False])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10**6))
def test_remove_com_zero_mean_and_idempotent(n, seed):
    x = torch.randn(n, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 5 + 3
    y = remove_com(x)
    assert y.mean(0).abs().max() <= 1e-13 * n * 10
    assert torch.allclose(remove_com(y), y, atol=1e-14)


def test_apply_invert_frame():
    x = torch.tensor([0.3, -2.0, 1.5])
    assert torch.equal(apply_frame(EYE, x), x)
    assert torch.allclose(apply_frame(rot_z(math.pi / 2), [1.0, 0, 0]), torch.tensor([0.0, -1.0, 0.0]), atol=1e-15)
    g = torch.Generator().manual_seed(5)
    for seed in range(20):
        o = random_rotation(seed)
        pts = torch.randn(7, 3, generator=g, dtype=torch.float64) * 3
        assert (invert_frame(o, apply_frame(o, pts)) - pts).abs().max() < 1e-12


def test_random_rotation_properties():
    assert torch.equal(random_rotation(11), random_rotation(11))
    rots = torch.stack([random_rotation(s) for s in range(1000)])
    assert (torch.linalg.det(rots) - 1).abs().max() < 1e-10
    # Haar measure: angle density (1 - cos t) / pi on [0, pi]
    expected, _ = quad(lambda t: t * (1 - math.cos(t)) / math.pi, 0, math.pi)
    assert abs(expected - (math.pi / 2 + 2 / math.pi)) < 1e-12
    mean_angle = float(geodesic_angle(EYE, rots).mean())
    assert 1.8 <= mean_angle <= 2.4
    assert abs(mean_angle - expected) < 0.1
