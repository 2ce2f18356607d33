import torch
torch.set_default_dtype(torch.float64)

import numpy as np
import pytest
import torch

from framediff.diffusion import FrameDiffusionModel, build_schedule
from framediff.molkit import MolBatch, collate, synth_toy_dataset

SMALL = dict(egnn_hidden=16, egnn_channels=4, egnn_layers=2, width=32, depth=2, heads=4)


def small_model(paradigm="gfd", seed=0, **kw):
    torch.manual_seed(seed)
    return FrameDiffusionModel(paradigm, **{**SMALL, **kw})


def random_batch(b=3, n=5, seed=0, feature_dim=6):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, n, 3, generator=g, dtype=torch.float64)
    h = torch.randn(b, n, feature_dim, generator=g, dtype=torch.float64) * 0.3
    mask = torch.ones(b, n, dtype=torch.bool)
    return MolBatch(x, h, mask).centered()


@pytest.fixture
def schedule10():
    return build_schedule(10)


@pytest.fixture
def toy_batch():
    return collate([m for m in synth_toy_dataset(12, 3) if m.num_atoms >= 3])
