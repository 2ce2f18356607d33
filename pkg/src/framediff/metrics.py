"""Evaluation of generated molecules: bonds, stability, validity, uniqueness, VLB.

Bonds are inferred from interatomic distances with a static table of
reference single/double/triple lengths. Validity here is an internal valence
and connectivity check, not a cheminformatics toolkit's sanitisation, so the
absolute numbers are not comparable to published tables.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources

import networkx as nx
import numpy as np
import torch

from .diffusion import FrameDiffusionModel, NoiseSchedule, forward_noise, zero_com_noise
from .geom import DTYPE
from .molkit import ATOM_TYPES, MolBatch, Molecule

VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2, "F": 1}
MARGINS = {1: 0.10, 2: 0.05, 3: 0.03}
INTERNAL_CHECKER_NOTE = "internal valence checker; not comparable to toolkit-based validity"


@lru_cache(maxsize=1)
def bond_table() -> dict[tuple[str, str, int], float]:
    text = resources.files("framediff").joinpath("data/bonds.tsv").read_text()
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        a, b, order, length = line.split()
        table[(a, b, int(order))] = float(length)
        table[(b, a, int(order))] = float(length)
    return table


def bond_order(a: str, b: str, distance: float) -> int:
    table = bond_table()
    order = 0
    for k in (1, 2, 3):
        ref = table.get((a, b, k))
        if ref is None or distance >= ref + MARGINS[k]:
            break
        order = k
    return order


def infer_bonds(mol: Molecule) -> np.ndarray:
    """Symmetric (N, N) bond-order matrix over the molecule's unmasked atoms."""
    mol = mol.compact()
    syms = mol.symbols
    n = len(syms)
    d = np.sqrt(((mol.coords[:, None] - mol.coords[None]) ** 2).sum(-1))
    bonds = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            bonds[i, j] = bonds[j, i] = bond_order(syms[i], syms[j], d[i, j])
    return bonds


def _valences(mol: Molecule, bonds: np.ndarray):
    syms = mol.compact().symbols
    have = bonds.sum(1)
    want = np.array([VALENCE[s] for s in syms])
    return have, want


def atom_stability(mol: Molecule, bonds: np.ndarray | None = None) -> float:
    bonds = infer_bonds(mol) if bonds is None else bonds
    have, want = _valences(mol, bonds)
    if len(have) == 0:
        return 0.0
    return float((have == want).mean())


def stable_atom_count(mol: Molecule, bonds: np.ndarray | None = None) -> tuple[int, int]:
    bonds = infer_bonds(mol) if bonds is None else bonds
    have, want = _valences(mol, bonds)
    return int((have == want).sum()), len(have)


def mol_stability(mol: Molecule, bonds: np.ndarray | None = None) -> bool:
    bonds = infer_bonds(mol) if bonds is None else bonds
    have, want = _valences(mol, bonds)
    return len(have) > 0 and bool((have == want).all())


def bond_graph(mol: Molecule, bonds: np.ndarray | None = None) -> nx.Graph:
    bonds = infer_bonds(mol) if bonds is None else bonds
    g = nx.Graph()
    for i, s in enumerate(mol.compact().symbols):
        g.add_node(i, elem=s)
    for i, j in zip(*np.nonzero(np.triu(bonds))):
        g.add_edge(int(i), int(j), order=str(int(bonds[i, j])))
    return g


def validity(mol: Molecule, bonds: np.ndarray | None = None) -> bool:
    """No atom over its nominal valence and a single connected component."""
    bonds = infer_bonds(mol) if bonds is None else bonds
    have, want = _valences(mol, bonds)
    if len(have) == 0 or (have > want).any():
        return False
    return nx.is_connected(bond_graph(mol, bonds))


def graph_hash(mol: Molecule, bonds: np.ndarray | None = None, rounds: int = 10) -> str:
    """Permutation-invariant hash by iterative neighbourhood label refinement."""
    return nx.weisfeiler_lehman_graph_hash(bond_graph(mol, bonds), node_attr="elem", edge_attr="order", iterations=rounds)


def uniqueness(mols: list[Molecule]) -> float:
    hashes = [graph_hash(m, b) for m in mols for b in [infer_bonds(m)] if validity(m, b)]
    if not hashes:
        return 1.0
    return len(set(hashes)) / len(hashes)


@dataclass
class GenerationReport:
    atom_stability: float
    mol_stability: float
    validity: float
    uniqueness: float
    vlb: float | None
    samples: int
    note: str = INTERNAL_CHECKER_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"# {self.note}"]
        for k, v in self.to_dict().items():
            if k == "note":
                continue
            lines.append(f"{k} = {v if v is not None else 'nan'}")
        return "\n".join(lines) + "\n"


def evaluate(mols: list[Molecule], vlb: float | None = None) -> GenerationReport:
    stable_atoms = total_atoms = stable_mols = valid = 0
    for m in mols:
        bonds = infer_bonds(m)
        s, n = stable_atom_count(m, bonds)
        stable_atoms += s
        total_atoms += n
        stable_mols += mol_stability(m, bonds)
        valid += validity(m, bonds)
    k = max(len(mols), 1)
    return GenerationReport(
        atom_stability=stable_atoms / max(total_atoms, 1),
        mol_stability=stable_mols / k,
        validity=valid / k,
        uniqueness=uniqueness(mols),
        vlb=vlb,
        samples=len(mols),
    )


# --- variational bound ----------------------------------------------------------

def _dims(mask: torch.Tensor, feature_dim: int) -> torch.Tensor:
    n = mask.sum(-1).to(DTYPE)
    return (n - 1) * 3 + n * feature_dim


@torch.no_grad()
def vlb_terms(model: FrameDiffusionModel, batch: MolBatch, schedule: NoiseSchedule, k: int,
              generator: torch.Generator) -> torch.Tensor:
    """Per-molecule negative-VLB samples, shape (k, B), in nats.

    Each sample is prior KL + T * (one uniformly drawn denoising KL term) +
    reconstruction NLL at t = 0. Dimensions count the zero-CoM coordinate
    subspace, (N - 1) * 3, plus N * feature_dim continuous features. For
    ``ifd`` the batch must already be canonical.
    """
    batch = batch.centered()
    mask = batch.mask
    w = mask[..., None].to(DTYPE)
    d = _dims(mask, batch.h.shape[-1])
    m = batch.z
    b = len(batch)
    T = schedule.T

    a_T, s_T = schedule.alpha[T], schedule.sigma[T]
    mean_sq = ((a_T * m) ** 2 * w).sum((-1, -2))
    prior = 0.5 * (mean_sq + d * (s_T**2 - 1.0 - torch.log(s_T**2)))

    a0, s0 = schedule.alpha[0], schedule.sigma[0]
    out = torch.empty(k, b, dtype=DTYPE)
    for i in range(k):
        t = torch.randint(1, T + 1, (b,), generator=generator)
        eps = zero_com_noise(mask, batch.h.shape[-1], generator)
        z = forward_noise(m, t, eps, schedule)
        eps_hat, _ = model.predict_noise(z, t, mask)
        err = ((eps - eps_hat) ** 2 * w).sum((-1, -2))
        weight = schedule.snr(t - 1) / schedule.snr(t) - 1.0
        diffusion = T * 0.5 * weight * err

        eps0 = zero_com_noise(mask, batch.h.shape[-1], generator)
        z0 = forward_noise(m, 0, eps0, schedule)
        t0 = torch.zeros(b, dtype=torch.long)
        eps0_hat, _ = model.predict_noise(z0, t0, mask)
        err0 = ((eps0 - eps0_hat) ** 2 * w).sum((-1, -2))
        var_x = s0**2 / a0**2
        recon = 0.5 * err0 + 0.5 * d * torch.log(2 * math.pi * var_x)
        out[i] = prior + diffusion + recon
    return out


def vlb_estimate(model: FrameDiffusionModel, batch: MolBatch, schedule: NoiseSchedule, k: int = 8,
                 seed: int = 0) -> float:
    """Monte-Carlo negative VLB, mean nats per molecule (lower is better)."""
    g = torch.Generator().manual_seed(int(seed))
    return float(vlb_terms(model, batch, schedule, k, g).mean())


__all__ = [
    "ATOM_TYPES", "infer_bonds", "atom_stability", "mol_stability", "validity", "uniqueness",
    "graph_hash", "evaluate", "GenerationReport", "vlb_estimate",
]
