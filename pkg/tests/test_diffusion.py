import math

import numpy as np
import pytest
import torch

from framediff import diffusion as D
from framediff.diffusion import (InvalidTError, NumericalUnderflowError, alignment_loss, build_schedule,
                                 forward_noise, gfd_training_loss, ifd_canonicalize, ifd_training_loss,
                                 lfd_training_loss, reverse_step, sample, sample_zero_com_noise, zero_com_noise)
from framediff.geom import random_rotation, rot_z, rotate
from framediff.molkit import MolBatch, collate, template_molecule
from framediff.verify import posterior_mean_oracle

from conftest import random_batch, small_model

EYE = torch.eye(3)


# --- schedule -----------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 10, 100, 1000])
def test_schedule_invariants(T):
    s = build_schedule(T)
    assert s.alpha.shape == (T + 1,)
    assert (s.alpha ** 2 + s.sigma ** 2 - 1).abs().max() <= 1e-12
    assert torch.all(s.alpha[1:] <= s.alpha[:-1])
    assert float(s.alpha[0]) >= 1 - 1e-4 and float(s.sigma[T]) >= 0.999


def test_schedule_T1000_endpoint():
    assert float(build_schedule(1000).alpha[1000]) <= 0.05


def test_schedule_closed_form_midpoint():
    # away from the clip, alpha^2 = (1 - 2e-5)(1 - (t/T)^2)^2 + 1e-5
    s = build_schedule(100)
    t = 50
    expected = math.sqrt((1 - 2e-5) * (1 - 0.25) ** 2 + 1e-5)
    assert abs(float(s.alpha[t]) - expected) <= 1e-12


def test_schedule_errors():
    for bad in (0, -3, 2.5):
        with pytest.raises(InvalidTError):
            build_schedule(bad)


# --- noise --------------------------------------------------------------------

def test_zero_com_noise_properties():
    e = sample_zero_com_noise(7, seed=3)
    assert e[:, :3].mean(0).abs().max() <= 1e-13 * 7
    assert torch.equal(e, sample_zero_com_noise(7, seed=3))
    one = sample_zero_com_noise(1, seed=0)
    assert torch.equal(one[:, :3], torch.zeros(1, 3))
    with pytest.raises(ValueError):
        sample_zero_com_noise(0)


def test_zero_com_noise_variance():
    n = 4
    g = torch.Generator().manual_seed(0)
    e = zero_com_noise(torch.ones(100_000, n, dtype=torch.bool), 6, g)
    var = float(e[..., :3].var())
    assert abs(var - (1 - 1 / n)) <= 0.02 * (1 - 1 / n)
    assert abs(float(e[..., 3:].var()) - 1) <= 0.02


def test_forward_noise_examples(schedule10):
    b = random_batch(2, 4, seed=0)
    eps = zero_com_noise(b.mask, 6, torch.Generator().manual_seed(1))
    assert torch.equal(forward_noise(b.z, 0, torch.zeros_like(eps), schedule10), schedule10.alpha[0] * b.z)
    z = forward_noise(b.z, torch.tensor([3, 7]), eps, schedule10)
    assert z[..., :3].mean(1).abs().max() <= 1e-12
    r = random_rotation(5)
    rz = forward_noise(torch.cat([rotate(b.x, r), b.h], -1), 4, torch.cat([rotate(eps[..., :3], r), eps[..., 3:]], -1), schedule10)
    assert (rz[..., :3] - rotate(forward_noise(b.z, 4, eps, schedule10)[..., :3], r)).abs().max() <= 1e-12


def test_reverse_step_posterior_mean_exhaustive(schedule10):
    g = torch.Generator().manual_seed(0)
    m = torch.randn(5, 9, generator=g)
    eps = torch.randn(5, 9, generator=g)
    for t in range(1, 11):
        z = forward_noise(m, t, eps, schedule10)
        got = reverse_step(z, eps, t, schedule10, None)
        assert (got - posterior_mean_oracle(schedule10, t, z, m)).abs().max() <= 1e-10


def test_reverse_step_reductions(schedule10):
    z = torch.randn(3, 9)
    got = reverse_step(z, torch.zeros_like(z), 4, schedule10)
    assert torch.allclose(got, z / schedule10.alpha_ts(4, 3), atol=0, rtol=1e-15)
    with pytest.raises(InvalidTError):
        reverse_step(z, z, 0, schedule10)
    with pytest.raises(InvalidTError):
        reverse_step(z, z, 11, schedule10)
    tiny = D.NoiseSchedule(2, torch.ones(3), torch.zeros(3))
    with pytest.raises(NumericalUnderflowError):
        reverse_step(z, z, 1, tiny)


# --- alignment ------------------------------------------------------------------

def test_alignment_closed_forms():
    f = random_rotation(2)
    assert float(alignment_loss(f.expand(4, 3, 3), f)) == 0.0
    val = alignment_loss(torch.stack([EYE, rot_z(math.pi)]), EYE)
    assert abs(float(val) - 0.5) <= 1e-10
    frames = torch.stack([random_rotation(s) for s in range(5)])
    g = random_rotation(9)
    base = alignment_loss(frames, g)
    r = random_rotation(10)
    assert abs(float(alignment_loss(r @ frames, r @ g) - base)) <= 1e-10
    assert 0 <= float(base) <= 1


# --- stub models ------------------------------------------------------------------

class OracleBackbone(torch.nn.Module):
    """Returns a fixed target expressed in the projected frame."""

    def __init__(self):
        super().__init__()
        self.target = None

    def forward(self, tokens, t, mask):
        return self.target(tokens)


def oracle_loss_zero(paradigm):
    model = small_model(paradigm)
    b = random_batch(2, 4, seed=1)
    sched = build_schedule(10)
    eps = zero_com_noise(b.mask, 6, torch.Generator().manual_seed(0))
    t = torch.tensor([3, 8])
    z = forward_noise(b.z, t, eps, sched)
    info = model.frames(z, b.mask)
    if paradigm == "gfd":
        o = info.global_frame[:, None]
    elif paradigm == "ifd":
        o = EYE.expand(2, 1, 3, 3)
    else:
        o = info.node_frames
    proj = torch.cat([o.transpose(-1, -2) @ eps[..., :3, None], eps[..., 3:, None]], -2)[..., 0]
    stub = OracleBackbone()
    stub.target = lambda tokens: proj
    model.backbone = stub
    if paradigm == "ifd":
        lb = ifd_training_loss(model, b, sched, t=t, eps=eps)
    elif paradigm == "gfd":
        lb = gfd_training_loss(model, b, sched, t=t, eps=eps)
    else:
        lb = lfd_training_loss(model, b, sched, 0.0, t=t, eps=eps)
    return lb.diff_loss.item()


@pytest.mark.parametrize("paradigm", ["gfd", "lfd", "ifd"])
def test_oracle_denoiser_gives_zero_loss(paradigm):
    assert oracle_loss_zero(paradigm) <= 1e-24


def test_lfd_equals_gfd_when_frames_coincide(monkeypatch):
    model = small_model("lfd")
    b = random_batch(3, 5, seed=2)
    sched = build_schedule(10)
    eps = zero_com_noise(b.mask, 6, torch.Generator().manual_seed(4))
    t = torch.tensor([1, 5, 9])
    real = model.frames

    def same_frames(z, mask):
        info = real(z, mask)
        info.node_frames = info.global_frame[:, None].expand_as(info.node_frames)
        return info

    monkeypatch.setattr(model, "frames", same_frames)
    lf = lfd_training_loss(model, b, sched, 0.3, t=t, eps=eps)
    gf = gfd_training_loss(model, b, sched, t=t, eps=eps)
    assert abs((lf.diff_loss - gf.diff_loss).item()) <= 1e-12
    assert lf.align_loss.item() <= 1e-7


def test_ifd_equals_gfd_with_identity_frame(monkeypatch):
    model = small_model("gfd")
    b = random_batch(2, 4, seed=3)
    sched = build_schedule(10)
    eps = zero_com_noise(b.mask, 6, torch.Generator().manual_seed(5))
    t = torch.tensor([2, 6])
    real = model.frames

    def identity(z, mask):
        info = real(z, mask)
        info.global_frame = EYE.expand_as(info.global_frame)
        return info

    monkeypatch.setattr(model, "frames", identity)
    gf = gfd_training_loss(model, b, sched, t=t, eps=eps)
    iff = ifd_training_loss(model, b, sched, t=t, eps=eps)
    assert abs((gf.diff_loss - iff.diff_loss).item()) <= 1e-12


# --- losses -------------------------------------------------------------------------

def test_loss_breakdown_total():
    model = small_model("lfd-aligned")
    b = random_batch(2, 5, seed=6)
    sched = build_schedule(10)
    g = torch.Generator().manual_seed(0)
    lb = lfd_training_loss(model, b, sched, 0.25, g)
    assert abs((lb.total - (lb.diff_loss + 0.25 * lb.align_loss)).item()) <= 1e-12
    lb0 = lfd_training_loss(model, b, sched, 0.0, torch.Generator().manual_seed(0))
    assert lb0.total.item() == lb0.diff_loss.item()
    with pytest.raises(ValueError):
        lfd_training_loss(model, b, sched, -1.0)


@pytest.mark.parametrize("paradigm", ["gfd", "lfd", "lfd-aligned", "ifd"])
def test_loss_deterministic_per_seed(paradigm):
    model = small_model(paradigm)
    b = random_batch(2, 4, seed=7)
    sched = build_schedule(10)
    a = D.training_loss(model, b, sched, torch.Generator().manual_seed(11))
    c = D.training_loss(model, b, sched, torch.Generator().manual_seed(11))
    assert a.total.item() == c.total.item()


@pytest.mark.parametrize("paradigm", ["gfd", "lfd", "lfd-aligned"])
def test_loss_rigid_motion_invariance(paradigm):
    model = small_model(paradigm)
    b = collate([template_molecule("CH3OH"), template_molecule("HCN")])
    sched = build_schedule(100)
    eps = zero_com_noise(b.mask, 6, torch.Generator().manual_seed(0))
    t = torch.tensor([30, 70])
    base = D.training_loss(model, b, sched, t=t, eps=eps).total.item()
    for s in range(5):
        r = random_rotation(s)
        moved = MolBatch(rotate(b.x, r) + torch.tensor([0.5, -2.0, 1.0]), b.h, b.mask).centered()
        reps = torch.cat([rotate(eps[..., :3], r), eps[..., 3:]], -1)
        got = D.training_loss(model, moved, sched, t=t, eps=reps).total.item()
        assert abs(got - base) <= 1e-6


# --- canonicalisation -----------------------------------------------------------------

def test_ifd_canonicalize_invariant_and_idempotent():
    model = small_model("ifd")
    b = collate([template_molecule("CH3OH")])
    can, flags = ifd_canonicalize(model, b)
    assert not flags.any()
    for s in range(5):
        r = random_rotation(s)
        c2, _ = ifd_canonicalize(model, MolBatch(rotate(b.x, r), b.h, b.mask))
        assert (c2.x - can.x).abs().max() <= 1e-5
    again, _ = ifd_canonicalize(model, can)
    assert (again.x - can.x).abs().max() <= 1e-5
    assert torch.equal(can.h, b.h)


def test_ifd_canonicalize_single_atom():
    model = small_model("ifd")
    one = MolBatch(torch.zeros(1, 1, 3), torch.randn(1, 1, 6), torch.ones(1, 1, dtype=torch.bool))
    out, flags = ifd_canonicalize(model, one)
    assert bool(flags[0]) and torch.equal(out.x, one.x)


# --- sampling -------------------------------------------------------------------------

@pytest.mark.parametrize("paradigm,calls", [("gfd", 10), ("lfd", 10), ("lfd-aligned", 10), ("ifd", 0)])
def test_sampling_frame_calls(paradigm, calls, schedule10):
    model = small_model(paradigm)
    res = sample(model, schedule10, [3, 5], seed=0)
    assert res.frame_calls == calls


def test_sampling_deterministic_and_centred(schedule10):
    model = small_model("gfd")
    a = sample(model, schedule10, [4, 2, 5], seed=3, track_com=True)
    b = sample(model, schedule10, [4, 2, 5], seed=3)
    assert torch.equal(a.batch.x, b.batch.x) and torch.equal(a.batch.h, b.batch.h)
    assert max(a.com_drift) <= 1e-10
    assert torch.equal(a.batch.x[1, 2:], torch.zeros(3, 3))
