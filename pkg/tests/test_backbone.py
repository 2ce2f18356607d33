import copy
import math

import torch

from framediff.backbone import MASK_BIAS, EdgeDiT, edge_bias, timestep_embedding
from framediff.geom import random_rotation, rotate
from framediff.molkit import FEATURE_DIM
from framediff.verify import check_gradients

from conftest import random_batch


def model(variant="edge", seed=0, **kw):
    torch.manual_seed(seed)
    return EdgeDiT(FEATURE_DIM, variant=variant, **kw)


def test_timestep_embedding_zero():
    e = timestep_embedding(0, 8)
    assert torch.equal(e, torch.tensor([0.0, 1.0] * 4))
    assert torch.equal(timestep_embedding(17, 8), timestep_embedding(17 + 0, 8))


def test_timestep_embeddings_distinct():
    e = timestep_embedding(torch.arange(1, 1001), 128)
    d = torch.cdist(e, e) + torch.eye(1000) * 1e9
    assert float(d.min()) > 1e-6


def test_edge_bias_contract():
    b = random_batch(1, 4, seed=0)
    w = torch.randn(16)
    mask = torch.tensor([[True, True, False, True]])
    bias = edge_bias(b.x, mask, w)
    assert torch.all(bias[0, :, 2] == MASK_BIAS)
    same = edge_bias(torch.zeros(1, 3, 3), torch.ones(1, 3, dtype=torch.bool), w)
    assert torch.all(same == same[0, 0, 0])
    full = edge_bias(b.x, b.mask, w)
    assert torch.allclose(full, full.transpose(-1, -2), atol=0, rtol=0)
    for s in range(10):
        r = random_rotation(s)
        moved = rotate(b.x, r) + torch.tensor([1.0, 2.0, -3.0])
        assert (edge_bias(moved, b.mask, w) - full).abs().max() <= 1e-10


def test_identical_tokens_identical_outputs():
    m = model()
    tok = torch.randn(1, 1, 3 + FEATURE_DIM).expand(1, 3, -1).clone()
    tok = torch.cat([tok, torch.randn(1, 2, 3 + FEATURE_DIM)], 1)
    out = m(tok, torch.tensor([10]), torch.ones(1, 5, dtype=torch.bool))
    assert torch.equal(out[0, 0], out[0, 1]) and torch.equal(out[0, 1], out[0, 2])


def test_permutation_equivariance():
    m = model()
    b = random_batch(2, 5, seed=3)
    t = torch.tensor([4, 60])
    out = m(b.z, t, b.mask)
    perm = torch.tensor([4, 2, 0, 1, 3])
    out_p = m(b.z[:, perm], t, b.mask[:, perm])
    assert (out_p - out[:, perm]).abs().max() <= 1e-12


def test_masked_outputs_zero():
    m = model()
    b = random_batch(1, 4, seed=4)
    mask = torch.tensor([[True, True, True, False]])
    out = m(b.z, torch.tensor([5]), mask)
    assert torch.equal(out[0, 3], torch.zeros(3 + FEATURE_DIM))


def test_plain_variant_differs_from_edge():
    edge = model("edge")
    plain = copy.deepcopy(edge)
    plain.variant = "plain"
    b = random_batch(2, 5, seed=5)
    t = torch.tensor([3, 30])
    diff = (edge(b.z, t, b.mask) - plain(b.z, t, b.mask)).abs().max()
    assert float(diff.detach()) > 1e-6


def test_gradients_match_finite_differences():
    m = model(width=32, depth=2, heads=4)
    b = random_batch(3, 4, seed=6)
    t = torch.tensor([2, 20, 80])

    def loss():
        return (m(b.z, t, b.mask) ** 2).sum()

    rep = check_gradients(loss, m, sample_count=64, h=1e-4, tol=1e-4, seed=0)
    assert rep.passed, rep.detail
