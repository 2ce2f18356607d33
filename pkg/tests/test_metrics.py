import numpy as np
import pytest
import torch

from framediff.diffusion import build_schedule
from framediff.geom import random_rotation
from framediff.metrics import (GenerationReport, atom_stability, bond_order, bond_table, evaluate, graph_hash,
                               infer_bonds, mol_stability, uniqueness, validity, vlb_estimate, vlb_terms)
from framediff.molkit import Molecule, collate, template_molecule

from conftest import small_model


def moved(mol, seed):
    r = random_rotation(seed).numpy()
    return Molecule(mol.coords @ r.T + np.array([1.5, -0.3, 2.0]), mol.atom_types, mol.charges, mol.mask)


def permuted(mol, perm):
    return Molecule(mol.coords[perm], mol.atom_types[perm], mol.charges[perm], mol.mask[perm])


def test_table_covers_all_pairs():
    t = bond_table()
    for a in "HCNOF":
        for b in "HCNOF":
            assert (a, b, 1) in t and t[(a, b, 1)] == t[(b, a, 1)]


def test_bond_order_examples():
    assert bond_order("C", "H", 1.09) == 1
    assert bond_order("H", "H", 3.0) == 0
    assert bond_order("C", "C", 1.20) == 3
    assert bond_order("C", "C", 1.34) == 2
    assert bond_order("C", "C", 1.54) == 1
    # thresholds: single length + 0.10 is already too long
    assert bond_order("C", "H", 1.09 + 0.10) == 0


def test_infer_bonds_symmetric():
    b = infer_bonds(template_molecule("C2H4"))
    assert np.array_equal(b, b.T) and np.all(np.diag(b) == 0) and b.max() == 2


@pytest.mark.parametrize("name", ["H2", "H2O", "NH3", "CH4", "C2H2", "C2H4", "CH3OH", "HCN"])
def test_templates_stable_and_valid(name):
    m = template_molecule(name)
    assert atom_stability(m) == 1.0 and mol_stability(m) and validity(m)


def test_methane_displaced_hydrogen():
    m = template_molecule("CH4")
    c = m.coords.copy()
    c[1] = c[1] / np.linalg.norm(c[1]) * 3.0
    bad = Molecule(c, m.atom_types, m.charges, m.mask)
    assert atom_stability(bad) == pytest.approx(3 / 5, abs=0)
    assert not mol_stability(bad)
    assert not validity(bad)  # the far hydrogen is a second fragment


def test_single_hydrogen_unstable():
    h = Molecule.from_symbols(["H"], [[0.0, 0, 0]])
    assert atom_stability(h) == 0.0 and not mol_stability(h)


def test_disconnected_invalid():
    a = template_molecule("H2O")
    b = template_molecule("CH4")
    two = Molecule.from_symbols(a.symbols + b.symbols, np.vstack([a.coords, b.coords + 10.0]))
    assert not validity(two)


def test_uniqueness_four_with_duplicates():
    ch4 = template_molecule("CH4")
    mols = [ch4, moved(ch4, 3), template_molecule("H2O"), template_molecule("CH3OH")]
    assert uniqueness(mols) == 0.75
    assert uniqueness([]) == 1.0
    bad = Molecule.from_symbols(["C"], [[0.0, 0, 0]])
    assert uniqueness([bad]) == 1.0


@pytest.mark.parametrize("name", ["CH3OH", "C2H4", "HCN", "NH3"])
def test_metrics_invariant_under_motion_and_permutation(name):
    m = template_molecule(name)
    ref = (atom_stability(m), mol_stability(m), validity(m), graph_hash(m))
    rng = np.random.default_rng(0)
    for s in range(10):
        p = rng.permutation(m.num_atoms)
        for other in (moved(m, s), permuted(m, p), permuted(moved(m, s), p)):
            assert (atom_stability(other), mol_stability(other), validity(other), graph_hash(other)) == ref
        assert np.array_equal(infer_bonds(moved(m, s)), infer_bonds(m))


def test_hash_distinguishes_isomers():
    assert graph_hash(template_molecule("CH3OH")) != graph_hash(template_molecule("C2H4"))


def test_evaluate_report():
    mols = [template_molecule("CH4"), template_molecule("H2O"), Molecule.from_symbols(["H"], [[0.0, 0, 0]])]
    rep = evaluate(mols, vlb=12.5)
    assert rep.atom_stability == pytest.approx(8 / 9)
    assert rep.mol_stability == pytest.approx(2 / 3)
    # a lone H is under-valent but not over-valent and trivially connected
    assert rep.validity == 1.0
    assert rep.uniqueness == 1.0 and rep.samples == 3
    text = rep.format()
    assert "atom_stability = " in text and "vlb = 12.5" in text and text.startswith("# internal")
    for v in (rep.atom_stability, rep.mol_stability, rep.validity, rep.uniqueness):
        assert 0 <= v <= 1


def test_vlb_deterministic_and_finite():
    model = small_model("gfd")
    batch = collate([template_molecule("CH4"), template_molecule("HCN")])
    sched = build_schedule(20)
    a = vlb_estimate(model, batch, sched, k=4, seed=1)
    assert np.isfinite(a) and a == vlb_estimate(model, batch, sched, k=4, seed=1)


def test_vlb_standard_error_scales():
    model = small_model("gfd")
    batch = collate([template_molecule("CH4")])
    sched = build_schedule(20)
    g = torch.Generator().manual_seed(0)
    draws = vlb_terms(model, batch, sched, 4000, g)[:, 0].numpy()

    def se(k):
        means = draws[: (len(draws) // k) * k].reshape(-1, k).mean(1)
        return means.std()

    ratio = se(10) / se(20)
    assert abs(ratio - np.sqrt(2)) <= 0.25


def test_vlb_improves_with_training():
    from framediff.diffusion import training_loss
    model = small_model("gfd", seed=1)
    batch = collate([template_molecule("CH4"), template_molecule("CH3OH")])
    sched = build_schedule(20)
    before = vlb_estimate(model, batch, sched, k=16, seed=0)
    opt = torch.optim.AdamW(model.parameters(), lr=2e-3)
    for step in range(300):
        lb = training_loss(model, batch, sched, torch.Generator().manual_seed(step))
        opt.zero_grad()
        lb.total.backward()
        opt.step()
    after = vlb_estimate(model, batch, sched, k=16, seed=0)
    assert after < before
