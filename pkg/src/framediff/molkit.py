"""Molecule data model, feature coding, XYZ I/O and the toy template dataset."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geom import DTYPE, EmptyMoleculeError, random_rotation, remove_com

ATOM_TYPES = ("H", "C", "N", "O", "F")
TYPE_INDEX = {s: i for i, s in enumerate(ATOM_TYPES)}
NUM_TYPES = len(ATOM_TYPES)
FEATURE_DIM = NUM_TYPES + 1
XYZ_COMMENT = "framediff v1"


class UnknownAtomTypeError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyHistogramError(ValueError):
    pass


@dataclass
class Molecule:
    coords: np.ndarray  # (N, 3) angstrom
    atom_types: np.ndarray  # (N,) index into ATOM_TYPES
    charges: np.ndarray  # (N,) int
    mask: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.atom_types = np.asarray(self.atom_types, dtype=np.int64)
        self.charges = np.asarray(self.charges, dtype=np.int64)
        if self.mask is None:
            self.mask = np.ones(len(self.coords), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.coords[~self.mask] = 0.0

    @property
    def num_atoms(self) -> int:
        return int(self.mask.sum())

    @property
    def symbols(self) -> list[str]:
        return [ATOM_TYPES[t] for t in self.atom_types[self.mask]]

    def compact(self) -> "Molecule":
        m = self.mask
        return Molecule(self.coords[m], self.atom_types[m], self.charges[m])

    def centered(self) -> "Molecule":
        x = remove_com(self.coords, self.mask).numpy()
        return Molecule(x, self.atom_types.copy(), self.charges.copy(), self.mask.copy())

    @classmethod
    def from_symbols(cls, symbols, coords, charges=None) -> "Molecule":
        types = []
        for s in symbols:
            if s not in TYPE_INDEX:
                raise UnknownAtomTypeError(s)
            types.append(TYPE_INDEX[s])
        if charges is None:
            charges = np.zeros(len(types), dtype=np.int64)
        return cls(np.asarray(coords, dtype=np.float64), types, charges)


@dataclass(frozen=True)
class FeatureCoding:
    """Continuous relaxation of (atom type, charge) used by the joint diffusion."""

    onehot_scale: float = 0.25
    charge_scale: float = 0.1

    def encode(self, atom_type, charge: int) -> np.ndarray:
        if isinstance(atom_type, str):
            if atom_type not in TYPE_INDEX:
                raise UnknownAtomTypeError(atom_type)
            atom_type = TYPE_INDEX[atom_type]
        if not 0 <= int(atom_type) < NUM_TYPES:
            raise UnknownAtomTypeError(str(atom_type))
        v = np.zeros(FEATURE_DIM)
        v[int(atom_type)] = self.onehot_scale
        v[NUM_TYPES] = self.charge_scale * charge
        return v

    def decode(self, v) -> tuple[str, int]:
        v = np.asarray(v, dtype=np.float64)
        # np.argmax returns the first maximum, so ties go to the lowest index
        idx = int(np.argmax(v[:NUM_TYPES]))
        charge = int(np.rint(v[NUM_TYPES] / self.charge_scale))
        return ATOM_TYPES[idx], charge

    def encode_molecule(self, mol: Molecule) -> np.ndarray:
        h = np.zeros((len(mol.atom_types), FEATURE_DIM))
        h[np.arange(len(h)), mol.atom_types] = self.onehot_scale
        h[:, NUM_TYPES] = self.charge_scale * mol.charges
        h[~mol.mask] = 0.0
        return h

    def decode_array(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(h, dtype=np.float64)
        types = np.argmax(h[..., :NUM_TYPES], axis=-1)
        charges = np.rint(h[..., NUM_TYPES] / self.charge_scale).astype(np.int64)
        return types, charges


DEFAULT_CODING = FeatureCoding()


def encode_features(atom_type, charge: int, coding: FeatureCoding = DEFAULT_CODING) -> np.ndarray:
    return coding.encode(atom_type, charge)


def decode_features(v, coding: FeatureCoding = DEFAULT_CODING) -> tuple[str, int]:
    return coding.decode(v)


@dataclass
class MolBatch:
    """Padded batch: coordinates ``x`` (B, N, 3), features ``h`` (B, N, F), ``mask`` (B, N)."""

    x: torch.Tensor
    h: torch.Tensor
    mask: torch.Tensor

    @property
    def z(self) -> torch.Tensor:
        return torch.cat([self.x, self.h], dim=-1)

    @classmethod
    def from_z(cls, z: torch.Tensor, mask: torch.Tensor) -> "MolBatch":
        return cls(z[..., :3], z[..., 3:], mask)

    def centered(self) -> "MolBatch":
        w = self.mask[..., None].to(DTYPE)
        return MolBatch(remove_com(self.x, self.mask), self.h * w, self.mask)

    def index(self, idx) -> "MolBatch":
        return MolBatch(self.x[idx], self.h[idx], self.mask[idx])

    def __len__(self) -> int:
        return self.x.shape[0]


def collate(mols: list[Molecule], coding: FeatureCoding = DEFAULT_CODING, center: bool = True) -> MolBatch:
    n_max = max(len(m.mask) for m in mols)
    b = len(mols)
    x = np.zeros((b, n_max, 3))
    h = np.zeros((b, n_max, FEATURE_DIM))
    mask = np.zeros((b, n_max), dtype=bool)
    for i, m in enumerate(mols):
        n = len(m.mask)
        x[i, :n] = m.coords
        h[i, :n] = coding.encode_molecule(m)
        mask[i, :n] = m.mask
    batch = MolBatch(torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(h, dtype=DTYPE), torch.as_tensor(mask))
    return batch.centered() if center else batch


def uncollate(batch: MolBatch, coding: FeatureCoding = DEFAULT_CODING) -> list[Molecule]:
    out = []
    x = batch.x.detach().cpu().numpy()
    h = batch.h.detach().cpu().numpy()
    mask = batch.mask.cpu().numpy()
    for i in range(len(batch)):
        m = mask[i]
        types, charges = coding.decode_array(h[i][m])
        out.append(Molecule(x[i][m], types, charges))
    return out


# --- XYZ I/O ---------------------------------------------------------------

def write_xyz(path, molecules: list[Molecule], comment: str = XYZ_COMMENT) -> None:
    lines = []
    for mol in molecules:
        mol = mol.compact()
        lines.append(str(mol.num_atoms))
        lines.append(comment)
        for sym, (x, y, z), q in zip(mol.symbols, mol.coords, mol.charges):
            lines.append(f"{sym} {x:.6f} {y:.6f} {z:.6f} {int(q)}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_xyz(path) -> list[Molecule]:
    """Read consecutive XYZ records; a missing charge column means charge 0."""
    text = Path(path).read_text()
    lines = text.splitlines()
    mols = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].split()[0])
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[i]!r}", i + 1) from None
        if n < 1:
            raise ParseError(f"atom count must be positive, got {n}", i + 1)
        if i + 2 + n > len(lines):
            raise ParseError(f"record declares {n} atoms but file ends early", i + 1)
        syms, coords, charges = [], [], []
        for k in range(i + 2, i + 2 + n):
            parts = lines[k].split()
            if len(parts) not in (4, 5):
                raise ParseError(f"expected 'SYMBOL x y z [charge]', got {lines[k]!r}", k + 1)
            if parts[0] not in TYPE_INDEX:
                raise ParseError(f"unknown atom type {parts[0]!r}", k + 1)
            try:
                coords.append([float(v) for v in parts[1:4]])
                charges.append(int(parts[4]) if len(parts) == 5 else 0)
            except ValueError:
                raise ParseError(f"bad number in {lines[k]!r}", k + 1) from None
            syms.append(parts[0])
        nxt = i + 2 + n
        if nxt < len(lines) and lines[nxt].strip() and len(lines[nxt].split()) != 1:
            raise ParseError(f"record declares {n} atoms but has more atom lines", nxt + 1)
        mols.append(Molecule.from_symbols(syms, coords, charges))
        i = nxt
    return mols


# --- toy dataset -------------------------------------------------------------

def _pyramidal(center_len: float, bond_angle_deg: float, n: int = 3) -> np.ndarray:
    cos_b = math.cos(math.radians(bond_angle_deg))
    sin2 = (1.0 - cos_b) / 1.5
    st, ct = math.sqrt(sin2), math.sqrt(1.0 - sin2)
    return np.array(
        [[center_len * st * math.cos(2 * math.pi * k / n), center_len * st * math.sin(2 * math.pi * k / n), -center_len * ct] for k in range(n)]
    )


def _templates() -> dict[str, tuple[list[str], np.ndarray]]:
    t = {}
    t["H2"] = (["H", "H"], np.array([[0.0, 0, 0], [0.74, 0, 0]]))
    a = math.radians(104.5 / 2)
    t["H2O"] = (["O", "H", "H"], np.array([[0.0, 0, 0], [0.96 * math.sin(a), 0.96 * math.cos(a), 0], [-0.96 * math.sin(a), 0.96 * math.cos(a), 0]]))
    t["NH3"] = (["N", "H", "H", "H"], np.vstack([[0.0, 0, 0], _pyramidal(1.01, 106.7)]))
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3)
    t["CH4"] = (["C", "H", "H", "H", "H"], np.vstack([[0.0, 0, 0], 1.09 * tet]))
    # multiple-bond lengths sit ~2.5 jitter sigmas inside the inference thresholds
    t["C2H2"] = (["C", "C", "H", "H"], np.array([[-0.58, 0, 0], [0.58, 0, 0], [-1.64, 0, 0], [1.64, 0, 0]]))
    b = math.radians(58.5)
    hx, hy = 0.66 + 1.09 * math.cos(b), 1.09 * math.sin(b)
    t["C2H4"] = (["C", "C", "H", "H", "H", "H"], np.array([[-0.66, 0, 0], [0.66, 0, 0], [hx, hy, 0], [hx, -hy, 0], [-hx, hy, 0], [-hx, -hy, 0]]))
    tt = math.radians(109.47)
    methyl = [[1.09 * math.cos(tt), 1.09 * math.sin(tt) * math.cos(p), 1.09 * math.sin(tt) * math.sin(p)] for p in np.radians([60.0, 180.0, 300.0])]
    coh = math.radians(180.0 - 108.5)
    t["CH3OH"] = (["C", "O", "H", "H", "H", "H"], np.vstack([[0.0, 0, 0], [1.43, 0, 0], [1.43 + 0.96 * math.cos(coh), 0.96 * math.sin(coh), 0], methyl]))
    t["HCN"] = (["H", "C", "N"], np.array([[-1.07, 0, 0], [0.0, 0, 0], [1.12, 0, 0]]))
    return t


TEMPLATES = _templates()
TEMPLATE_NAMES = tuple(TEMPLATES)
JITTER_SIGMA = 0.02


def template_molecule(name: str) -> Molecule:
    syms, coords = TEMPLATES[name]
    return Molecule.from_symbols(syms, coords).centered()


def synth_toy_dataset(n: int, seed: int) -> list[Molecule]:
    """Jittered, randomly rotated and translated copies of the template library."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    names = TEMPLATE_NAMES
    out = []
    for _ in range(n):
        syms, coords = TEMPLATES[names[rng.integers(len(names))]]
        x = coords - coords.mean(0)
        x = x + rng.normal(0.0, JITTER_SIGMA, size=x.shape)
        rot = random_rotation(rng).numpy()
        x = x @ rot.T + rng.uniform(-1.0, 1.0, size=3)
        out.append(Molecule.from_symbols(syms, x))
    return out


def atom_count_histogram(mols: list[Molecule]) -> dict[int, float]:
    c = Counter(m.num_atoms for m in mols)
    total = sum(c.values())
    return {k: c[k] / total for k in sorted(c)}


def sample_atom_counts(hist: dict[int, float], n: int, seed) -> np.ndarray:
    if not hist:
        raise EmptyHistogramError("atom-count histogram is empty")
    keys = np.array(sorted(hist), dtype=np.int64)
    p = np.array([hist[k] for k in keys], dtype=np.float64)
    if (p < 0).any() or p.sum() <= 0:
        raise EmptyHistogramError("atom-count histogram has no mass")
    rng = np.random.default_rng(seed)
    return rng.choice(keys, size=n, p=p / p.sum())


def sample_atom_count(hist: dict[int, float], seed) -> int:
    return int(sample_atom_counts(hist, 1, seed)[0])


@dataclass
class DatasetManifest:
    paths: list[str]
    count: int
    histogram: dict[int, int] = field(default_factory=dict)
    onehot_scale: float = DEFAULT_CODING.onehot_scale
    charge_scale: float = DEFAULT_CODING.charge_scale

    @classmethod
    def build(cls, paths, mols: list[Molecule], coding: FeatureCoding = DEFAULT_CODING) -> "DatasetManifest":
        hist = Counter(m.num_atoms for m in mols)
        return cls([str(p) for p in paths], len(mols), dict(sorted(hist.items())), coding.onehot_scale, coding.charge_scale)


__all__ = [
    "ATOM_TYPES", "FEATURE_DIM", "Molecule", "MolBatch", "FeatureCoding", "EmptyMoleculeError",
    "encode_features", "decode_features", "read_xyz", "write_xyz", "synth_toy_dataset",
    "sample_atom_count", "sample_atom_counts", "collate", "uncollate",
]
