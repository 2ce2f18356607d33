"""Executable symmetry and numerics oracles.

Every check returns an :class:`OracleReport`. ``passed`` is simply
``max_deviation <= tolerance``; negative controls set ``expected=False`` and
are healthy when they fail.
"""
from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import metrics as M
from .backbone import EdgeDiT, edge_bias
from .diffusion import (
    FrameDiffusionModel, NoiseSchedule, alignment_loss, build_schedule, forward_noise, ifd_canonicalize,
    reverse_step, training_loss, zero_com_noise,
)
from .equinet import MCEquiNet, global_frame, node_frames
from .geom import (
    DTYPE, apply_frame, frame_errors, geodesic_angle, gram_schmidt, invert_frame, random_rotation, remove_com, rotate,
)
from .molkit import (
    ATOM_TYPES, FEATURE_DIM, MolBatch, Molecule, TEMPLATE_NAMES, collate, decode_features, encode_features,
    read_xyz, synth_toy_dataset, template_molecule, write_xyz,
)

GROUPS = ("rotation", "translation", "permutation", "roto-translation")
TOL_GEOMETRY = 1e-10
TOL_NETWORK = 1e-6
TOL_PIPELINE = 1e-5
TOL_GRADIENT = 1e-4


@dataclass
class OracleReport:
    name: str
    max_deviation: float
    tolerance: float
    passed: bool
    trials: int
    seed: int
    expected: bool = True
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.passed == self.expected

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        kind = "" if self.expected else " (negative control)"
        return f"{status}  {self.name:<50s} dev={self.max_deviation:.3e}  tol={self.tolerance:.0e}  trials={self.trials}  seed={self.seed}{kind}"


def report(name, dev, tol, trials, seed, expected=True, detail="") -> OracleReport:
    dev = float(dev)
    return OracleReport(name, dev, tol, bool(dev <= tol), trials, seed, expected, detail)


def format_table(reports: list[OracleReport]) -> str:
    lines = [r.line() for r in reports]
    ok = sum(r.ok for r in reports)
    lines.append(f"{ok}/{len(reports)} checks behaved as expected")
    return "\n".join(lines) + "\n"


# --- generic oracles -------------------------------------------------------------

def random_molecules(count: int, seed: int, n_range=(3, 6), feature_dim: int = FEATURE_DIM) -> MolBatch:
    """Padded batch of random point clouds with random continuous features."""
    g = torch.Generator().manual_seed(int(seed))
    counts = torch.randint(n_range[0], n_range[1] + 1, (count,), generator=g)
    n = int(counts.max())
    mask = torch.arange(n)[None] < counts[:, None]
    x = torch.randn(count, n, 3, generator=g, dtype=DTYPE) * 1.2
    h = torch.randn(count, n, feature_dim, generator=g, dtype=DTYPE) * 0.3
    return MolBatch(x, h, mask).centered()


def _permute(batch: MolBatch, perm: torch.Tensor) -> MolBatch:
    idx = perm[..., None]
    return MolBatch(
        torch.gather(batch.x, 1, idx.expand(-1, -1, batch.x.shape[-1])),
        torch.gather(batch.h, 1, idx.expand(-1, -1, batch.h.shape[-1])),
        torch.gather(batch.mask, 1, perm),
    )


def _random_perm(mask: torch.Tensor, g: torch.Generator) -> torch.Tensor:
    b, n = mask.shape
    return torch.stack([torch.randperm(n, generator=g) for _ in range(b)])


def check_equivariance(fn: Callable[[MolBatch], MolBatch], group: str, trials: int = 10, tol: float = TOL_PIPELINE,
                       seed: int = 0, batch: MolBatch | None = None, output: str = "vector",
                       feature_tol: float | None = None, name: str | None = None, expected: bool = True) -> OracleReport:
    """Compare fn(T_g x) with S_g fn(x) over ``trials`` sampled group elements.

    ``output="vector"`` means output coordinates only rotate (noise, forces);
    ``"point"`` means they also translate. Features are checked for
    invariance (or permuted alongside atoms). The reported deviation is the
    larger of coordinate and feature deviation, each divided by its own
    tolerance and rescaled to ``tol``.
    """
    if group not in GROUPS:
        raise ValueError(f"group must be one of {GROUPS}")
    feature_tol = tol if feature_tol is None else feature_tol
    batch = random_molecules(10, seed) if batch is None else batch
    base = fn(batch)
    g = torch.Generator().manual_seed(int(seed) + 1)
    wmask = batch.mask[..., None]
    dev_x = dev_h = 0.0
    for k in range(trials):
        rot = random_rotation([int(seed), k]) if group in ("rotation", "roto-translation") else torch.eye(3, dtype=DTYPE)
        shift = torch.randn(3, generator=g, dtype=DTYPE) * 3 if group in ("translation", "roto-translation") else torch.zeros(3, dtype=DTYPE)
        if group == "permutation":
            perm = _random_perm(batch.mask, g)
            moved = _permute(batch, perm)
            got = fn(moved)
            want = _permute(base, perm)
            m = moved.mask[..., None]
        else:
            moved = MolBatch(rotate(batch.x, rot) + shift * wmask, batch.h, batch.mask)
            got = fn(moved)
            wx = rotate(base.x, rot) if group != "translation" else base.x
            if output == "point":
                wx = wx + shift * wmask
            want = MolBatch(wx, base.h, base.mask)
            m = wmask
        dev_x = max(dev_x, float(((got.x - want.x).abs() * m).max()))
        dev_h = max(dev_h, float(((got.h - want.h).abs() * m).max()))
    dev = max(dev_x, dev_h * tol / feature_tol)
    detail = f"coords {dev_x:.3e}, features {dev_h:.3e} (feature tol {feature_tol:.0e})"
    return report(name or f"equivariance.{group}", dev, tol, trials, seed, expected, detail)


def _flat_params(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, torch.nn.Module):
        return [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    return list(params)


def check_gradients(loss_fn: Callable[[], torch.Tensor], params, sample_count: int = 64, h: float = 1e-4,
                    tol: float = TOL_GRADIENT, seed: int = 0, analytic: dict[str, torch.Tensor] | None = None,
                    name: str = "gradients", expected: bool = True) -> OracleReport:
    """Central finite differences on a random subset of scalar parameters.

    ``analytic`` overrides autograd (used by negative controls). The metric is
    max |a - n| / (|a| + |n| + 1e-8) over the sampled entries.
    """
    named = _flat_params(params)
    if analytic is None:
        for _, p in named:
            p.grad = None
        loss_fn().backward()
        analytic = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(offsets[-1]), size=min(sample_count, int(offsets[-1])), replace=False)
    worst = 0.0
    where = ""
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            pname, p = named[k]
            i = int(flat - offsets[k])
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + h
            up = float(loss_fn())
            view[i] = orig - h
            down = float(loss_fn())
            view[i] = orig
            num = (up - down) / (2 * h)
            ana = float(analytic[pname].reshape(-1)[i])
            rel = abs(ana - num) / (abs(ana) + abs(num) + 1e-8)
            if rel > worst:
                worst, where = rel, f"{pname}[{i}] analytic={ana:.6e} numeric={num:.6e}"
    return report(name, worst, tol, len(picks), seed, expected, where)


# --- module checks ----------------------------------------------------------------

def _geom_checks(seed):
    g = torch.Generator().manual_seed(seed)
    v1 = torch.randn(200, 3, generator=g, dtype=DTYPE)
    v2 = torch.randn(200, 3, generator=g, dtype=DTYPE)
    rots = torch.stack([random_rotation([seed, k]) for k in range(200)])
    f = gram_schmidt(v1, v2)
    f_rot = gram_schmidt((rots @ v1[..., None])[..., 0], (rots @ v2[..., None])[..., 0])
    yield report("geom.gram_schmidt_equivariance", (f_rot - rots @ f).abs().max(), TOL_GEOMETRY, 200, seed)
    yield report("geom.frame_invariants", max(frame_errors(f).values()), TOL_GEOMETRY, 200, seed)
    a = torch.stack([random_rotation([seed, 1000 + k]) for k in range(200)])
    d0 = geodesic_angle(a, f)
    yield report("geom.geodesic_left_invariance", (geodesic_angle(rots @ a, rots @ f) - d0).abs().max(), TOL_GEOMETRY, 200, seed)
    dev = 0.0
    for n in (1, 2, 5, 17, 64):
        x = remove_com(torch.randn(n, 3, generator=g, dtype=DTYPE) * 10 + 5)
        dev = max(dev, float(x.mean(0).abs().max()) / n)
    yield report("geom.remove_com_zero_mean_per_atom", dev, 1e-13, 5, seed)
    pts = torch.randn(200, 4, 3, generator=g, dtype=DTYPE) * 5
    back = invert_frame(rots[:, None], apply_frame(rots[:, None], pts))
    yield report("geom.frame_roundtrip", (back - pts).abs().max(), 1e-12, 200, seed)


def _molkit_checks(seed):
    bad = 0
    for t in ATOM_TYPES:
        for c in (-1, 0, 1):
            bad += decode_features(encode_features(t, c)) != (t, c)
    yield report("molkit.feature_roundtrip", bad, 0, 15, seed)
    mols = synth_toy_dataset(20, seed)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "rt.xyz"
        write_xyz(p, mols)
        back = read_xyz(p)
    dev = max(float(np.abs(a.coords - b.coords).max()) for a, b in zip(mols, back))
    same = all(np.array_equal(a.atom_types, b.atom_types) and np.array_equal(a.charges, b.charges) for a, b in zip(mols, back))
    yield report("molkit.xyz_roundtrip", dev if same else math.inf, 1e-6, len(mols), seed)
    dev = max(float(remove_com(m.coords).mean(0).abs().max()) for m in mols)
    yield report("molkit.synth_centered", dev, 1e-12, len(mols), seed)


def _channels_fn(net: MCEquiNet):
    def fn(b: MolBatch) -> MolBatch:
        st = net(remove_com(b.x, b.mask), b.h, b.mask)
        return MolBatch(st.channels.flatten(-2), st.scalars, b.mask)
    return fn


def _equinet_checks(seed):
    torch.manual_seed(seed)
    net = MCEquiNet(FEATURE_DIM)
    batch = random_molecules(10, seed)

    # channels are (C, 3) per node; compare rotated channels directly
    base = net(batch.x, batch.h, batch.mask)
    dev_c = dev_s = 0.0
    for k in range(100):
        r = random_rotation([seed, k])
        st = net(rotate(batch.x, r), batch.h, batch.mask)
        dev_c = max(dev_c, float((st.channels - rotate(base.channels, r)).abs().max()))
        dev_s = max(dev_s, float((st.scalars - base.scalars).abs().max()))
    yield report("equinet.rotation_equivariance", max(dev_c, dev_s), TOL_NETWORK, 100 * len(batch), seed,
                 detail=f"channels {dev_c:.3e}, scalars {dev_s:.3e}")
    fn = _channels_fn(net)
    yield check_equivariance(fn, "translation", 10, 1e-12, seed, batch, output="vector", name="equinet.translation_invariance")
    yield check_equivariance(fn, "permutation", 10, 1e-12, seed, batch, name="equinet.permutation_equivariance")

    dev = 0.0
    trials = 0
    for k in range(20):
        r = random_rotation([seed, 500 + k])
        o, fl = global_frame(base)
        o2, fl2 = global_frame(net(rotate(batch.x, r), batch.h, batch.mask))
        ok = ~(fl | fl2)
        trials += int(ok.sum())
        dev = max(dev, float((o2[ok] - r @ o[ok]).abs().max()))
    yield report("equinet.global_frame_equivariance", dev, TOL_NETWORK, trials, seed)


def _backbone_checks(seed):
    torch.manual_seed(seed)
    bb = EdgeDiT(FEATURE_DIM)
    batch = random_molecules(4, seed)
    t = torch.tensor([3, 50, 77, 100])

    def fn(b: MolBatch) -> MolBatch:
        return MolBatch.from_z(bb(b.z, t, b.mask), b.mask)

    yield check_equivariance(fn, "permutation", 10, 1e-12, seed, batch, name="backbone.permutation_equivariance")
    w = bb.rbf_weight.detach()
    base = edge_bias(batch.x, batch.mask, w)
    dev = 0.0
    g = torch.Generator().manual_seed(seed)
    for k in range(20):
        r = random_rotation([seed, 900 + k])
        moved = rotate(batch.x, r) + torch.randn(3, generator=g, dtype=DTYPE)
        dev = max(dev, float((edge_bias(moved, batch.mask, w) - base).abs().max()))
    yield report("backbone.edge_bias_isometry_invariance", dev, TOL_GEOMETRY, 20, seed)


def _loss_at(model, batch: MolBatch, schedule, t, eps):
    return training_loss(model, batch.centered(), schedule, t=t, eps=eps).total


def denoiser_fn(model: FrameDiffusionModel, t: torch.Tensor):
    """One-step noise predictor on raw (uncentred) inputs, as a MolBatch map."""
    def fn(b: MolBatch) -> MolBatch:
        c = b.centered()
        eps, _ = model.predict_noise(c.z, t.expand(len(b)), b.mask)
        return MolBatch.from_z(eps, b.mask)
    return fn


def plain_on_raw_fn(backbone: EdgeDiT, t: torch.Tensor):
    def fn(b: MolBatch) -> MolBatch:
        return MolBatch.from_z(backbone(b.z, t.expand(len(b)), b.mask), b.mask)
    return fn


def equivariance_suite_batch(seed) -> MolBatch:
    return random_molecules(10, seed)


def gfd_equivariance_reports(seed, rotations=100, model=None):
    torch.manual_seed(seed)
    model = model or FrameDiffusionModel("gfd")
    batch = equivariance_suite_batch(seed)
    t = torch.tensor(37)
    with torch.no_grad():
        pos = check_equivariance(denoiser_fn(model, t), "roto-translation", rotations, TOL_PIPELINE, seed, batch,
                                 feature_tol=TOL_NETWORK, name="diffusion.gfd_denoiser_equivariance")
        neg = check_equivariance(plain_on_raw_fn(model.backbone, t), "rotation", rotations, 1e-2, seed, batch,
                                 name="control.plain_backbone_raw_coords", expected=False)
    return pos, neg


def loss_invariance_report(paradigm: str, seed: int, motions: int = 20, molecules=None) -> OracleReport:
    """|L(Rm + t, R eps) - L(m, eps)| per molecule over random rigid motions."""
    torch.manual_seed(seed)
    model = FrameDiffusionModel(paradigm)
    schedule = build_schedule(100)
    if molecules is None:
        molecules = [template_molecule(n) for n in TEMPLATE_NAMES]
    molecules = [m for m in molecules if m.num_atoms >= 3]
    g = torch.Generator().manual_seed(seed)
    dev = 0.0
    with torch.no_grad():
        for mi, mol in enumerate(molecules):
            b = collate([mol])
            t = torch.randint(1, schedule.T + 1, (1,), generator=g)
            eps = zero_com_noise(b.mask, FEATURE_DIM, g)
            ref = float(_loss_at(model, b, schedule, t, eps))
            for k in range(motions):
                r = random_rotation([seed, mi, k])
                shift = torch.randn(3, generator=g, dtype=DTYPE) * 2
                moved = MolBatch(rotate(b.x, r) + shift, b.h, b.mask)
                eps_r = torch.cat([rotate(eps[..., :3], r), eps[..., 3:]], dim=-1)
                dev = max(dev, abs(float(_loss_at(model, moved, schedule, t, eps_r)) - ref))
    return report(f"diffusion.loss_invariance.{paradigm}", dev, TOL_NETWORK, motions * len(molecules), seed)


def _diffusion_equivariance_checks(seed):
    yield from gfd_equivariance_reports(seed)
    for p in ("gfd", "lfd", "lfd-aligned"):
        yield loss_invariance_report(p, seed)
    yield ifd_invariance_report(seed)
    yield alignment_range_report(seed)
    yield alignment_closed_form_report(seed)
    yield frame_call_report(seed)


def jittered_templates(seed) -> tuple[list[str], list[Molecule]]:
    """One jittered copy of every template (exact templates are often symmetric, hence degenerate)."""
    from .molkit import JITTER_SIGMA

    rng = np.random.default_rng([int(seed), 17])
    names, mols = [], []
    for n in TEMPLATE_NAMES:
        t = template_molecule(n)
        names.append(f"{n}~")
        mols.append(Molecule(t.coords + rng.normal(0.0, JITTER_SIGMA, t.coords.shape), t.atom_types, t.charges))
    return names, mols


def ifd_invariance_report(seed, rotations: int = 50, jittered: bool = True) -> OracleReport:
    """canonicalize(R mol) vs canonicalize(mol) on the templates, skipping flagged degenerate frames.

    With ``jittered`` a noisy copy of every template is checked as well
    (name suffix ``~``); those are the molecules training actually sees.
    """
    torch.manual_seed(seed)
    model = FrameDiffusionModel("ifd")
    names = list(TEMPLATE_NAMES)
    mols = [template_molecule(n) for n in names]
    if jittered:
        jn, jm = jittered_templates(seed)
        names += jn
        mols += jm
    batch = collate(mols)
    dev = 0.0
    trials = 0
    with torch.no_grad():
        base, flags = ifd_canonicalize(model, batch)
        for k in range(rotations):
            r = random_rotation([seed, 300 + k])
            can, fl = ifd_canonicalize(model, MolBatch(rotate(batch.x, r), batch.h, batch.mask))
            ok = ~(flags | fl)
            trials += int(ok.sum())
            dev = max(dev, float(((can.x - base.x).abs() * batch.mask[..., None])[ok].max()))
    skipped = [n for n, f in zip(names, flags.tolist()) if f]
    return report("diffusion.ifd_canonical_invariance", dev, TOL_PIPELINE, trials, seed,
                  detail=f"{len(names) - len(skipped)} of {len(names)} molecules checked; degenerate: {skipped}")


def alignment_range_report(seed) -> OracleReport:
    """alignment_loss lies in [0, 1] and vanishes when all frames equal the global one."""
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for k in range(50):
        frames = torch.stack([random_rotation([seed, k, i]) for i in range(5)])
        glob = random_rotation([seed, k, 99])
        v = float(alignment_loss(frames, glob))
        worst = max(worst, max(0.0, -v, v - 1.0))
        same = float(alignment_loss(glob.expand(5, 3, 3), glob))
        worst = max(worst, abs(same))
    return report("diffusion.alignment_loss_range", worst, TOL_GEOMETRY, 50, seed)


def alignment_closed_form_report(seed) -> OracleReport:
    """Identical frames give 0, {I, Rz(pi)} against I gives 1/2, left rotations change nothing."""
    from .geom import rot_z

    eye = torch.eye(3, dtype=DTYPE)
    f = random_rotation([seed, 7])
    dev = abs(float(alignment_loss(f.expand(4, 3, 3), f)))
    dev = max(dev, abs(float(alignment_loss(torch.stack([eye, rot_z(math.pi)]), eye)) - 0.5))
    for k in range(20):
        frames = torch.stack([random_rotation([seed, 40 + k, i]) for i in range(4)])
        glob = random_rotation([seed, 40 + k, 9])
        r = random_rotation([seed, 80 + k])
        dev = max(dev, abs(float(alignment_loss(r @ frames, r @ glob) - alignment_loss(frames, glob))))
    return report("diffusion.alignment_closed_forms", dev, TOL_GEOMETRY, 22, seed)


def frame_call_report(seed, T: int = 12) -> OracleReport:
    """Frame-constructor invocations per sampling trajectory: T with frames in the loop, 0 for ifd."""
    from .diffusion import sample

    sch = build_schedule(T)
    dev = 0
    seen = []
    for paradigm in ("gfd", "lfd", "lfd-aligned", "ifd"):
        torch.manual_seed(seed)
        model = FrameDiffusionModel(paradigm, egnn_hidden=16, egnn_channels=4, egnn_layers=1, width=32, depth=1, heads=2)
        calls = sample(model, sch, [3, 5], seed=seed).frame_calls
        want = 0 if paradigm == "ifd" else T
        dev = max(dev, abs(calls - want))
        seen.append(f"{paradigm}={calls}")
    return report("diffusion.sampling_frame_calls", dev, 0, 4, seed, detail=", ".join(seen))


def posterior_mean_oracle(schedule: NoiseSchedule, t: int, z_t, m):
    """Mean of q(z_{t-1} | z_t, m) by conditioning the Gaussian chain directly.

    Prior z_s ~ N(alpha_s m, sigma_s^2); likelihood z_t | z_s ~ N(a z_s, 1 - a^2)
    with a = alpha_t / alpha_s. Precision-weighted combination.
    """
    s = t - 1
    a_s, s_s = float(schedule.alpha[s]), float(schedule.sigma[s])
    a = float(schedule.alpha[t]) / a_s
    var_lik = float(schedule.sigma[t]) ** 2 - a * a * s_s * s_s
    prec = 1.0 / s_s**2 + a * a / var_lik
    return (a_s * m / s_s**2 + a * z_t / var_lik) / prec


def _schedule_checks(seed):
    sch = build_schedule(1000)
    yield report("diffusion.schedule_identity", (sch.alpha**2 + sch.sigma**2 - 1).abs().max(), 1e-12, 1001, seed)
    mono = float(torch.clamp(sch.alpha[1:] - sch.alpha[:-1], min=0).max())
    bounds = max(0.0, (1 - 1e-4) - float(sch.alpha[0]), 0.999 - float(sch.sigma[-1]))
    yield report("diffusion.schedule_monotone_bounds", max(mono, bounds), 0.0, 1000, seed)

    sch10 = build_schedule(10)
    g = torch.Generator().manual_seed(seed)
    mask = torch.ones(4, 5, dtype=torch.bool)
    m = torch.cat([remove_com(torch.randn(4, 5, 3, generator=g, dtype=DTYPE), mask),
                   torch.randn(4, 5, FEATURE_DIM, generator=g, dtype=DTYPE) * 0.25], -1)
    dev = 0.0
    for t in range(1, 11):
        eps = zero_com_noise(mask, FEATURE_DIM, g)
        z = forward_noise(m, t, eps, sch10)
        got = reverse_step(z, eps, t, sch10, None)
        dev = max(dev, float((got - posterior_mean_oracle(sch10, t, z, m)).abs().max()))
    yield report("diffusion.reverse_step_posterior_mean", dev, 1e-10, 10, seed)

    yield zero_com_report(seed)


def zero_com_report(seed, T: int = 100) -> OracleReport:
    """CoM drift after forward_noise and after each reverse step of a full trajectory."""
    torch.manual_seed(seed)
    model = FrameDiffusionModel("gfd")
    sch = build_schedule(T)
    batch = collate(synth_toy_dataset(8, seed))
    g = torch.Generator().manual_seed(seed)

    def drift(z):
        w = batch.mask[..., None].to(DTYPE)
        return float(((z[..., :3] * w).sum(-2) / w.sum(-2)).abs().max())

    dev = 0.0
    with torch.no_grad():
        for t in (1, T // 2, T):
            dev = max(dev, drift(forward_noise(batch.z, t, zero_com_noise(batch.mask, FEATURE_DIM, g), sch)))
        z = zero_com_noise(batch.mask, FEATURE_DIM, g)
        for t in range(T, 0, -1):
            tt = torch.full((len(batch),), t)
            eps, _ = model.predict_noise(z, tt, batch.mask)
            z = reverse_step(z, eps, t, sch, zero_com_noise(batch.mask, FEATURE_DIM, g) if t > 1 else None)
            dev = max(dev, drift(z))
    return report("diffusion.zero_com_conservation", dev, 1e-10, T + 3, seed)


def gradient_reports(seed, sample_count: int = 64):
    out = []
    sch = build_schedule(100)
    batch = collate([template_molecule(n) for n in ("CH4", "CH3OH", "NH3")])
    for paradigm in ("gfd", "lfd-aligned"):
        torch.manual_seed(seed)
        model = FrameDiffusionModel(paradigm)

        def loss_fn(model=model):
            g = torch.Generator().manual_seed(seed)
            return training_loss(model, batch, sch, g).total

        out.append(check_gradients(loss_fn, model, sample_count, 1e-4, TOL_GRADIENT, seed,
                                   name=f"gradients.{paradigm.replace('-', '_')}_loss"))
    torch.manual_seed(seed)
    bb = EdgeDiT(FEATURE_DIM)
    t = torch.tensor([5, 40, 90])

    def bb_loss():
        return (bb(batch.z, t, batch.mask) ** 2).sum()

    out.append(check_gradients(bb_loss, bb, sample_count, 1e-4, TOL_GRADIENT, seed, name="gradients.backbone_forward"))
    out.append(corrupted_gradient_report(seed))
    return out


def corrupted_gradient_report(seed) -> OracleReport:
    theta = torch.linspace(-1.0, 2.0, 16, dtype=DTYPE).requires_grad_()

    def loss_fn():
        return (theta**2).sum()

    grad = {"theta": 2 * theta.detach().clone()}
    grad["theta"][3] *= 2.0
    return check_gradients(loss_fn, [("theta", theta)], 16, 1e-4, TOL_GRADIENT, seed, analytic=grad,
                           name="control.corrupted_gradient", expected=False)


def _metrics_checks(seed):
    mols = synth_toy_dataset(40, seed)
    g = torch.Generator().manual_seed(seed)
    bad = 0
    for k, mol in enumerate(mols):
        bonds = M.infer_bonds(mol)
        r = random_rotation([seed, k]).numpy()
        moved = Molecule(mol.coords @ r.T + np.array([1.5, -2.0, 0.7]), mol.atom_types, mol.charges)
        mb = M.infer_bonds(moved)
        perm = torch.randperm(mol.num_atoms, generator=g).numpy()
        pm = Molecule(mol.coords[perm], mol.atom_types[perm], mol.charges[perm])
        pb = M.infer_bonds(pm)
        bad += not np.array_equal(bonds, mb)
        bad += M.atom_stability(mol) != M.atom_stability(moved) or M.validity(mol) != M.validity(moved)
        bad += not np.array_equal(bonds[np.ix_(perm, perm)], pb)
        bad += M.atom_stability(mol) != M.atom_stability(pm) or M.validity(mol) != M.validity(pm)
        bad += M.mol_stability(mol) != M.mol_stability(pm)
        bad += M.graph_hash(mol) != M.graph_hash(pm)
    yield report("metrics.rigid_motion_and_permutation_invariance", bad, 0, len(mols), seed)
    rep = M.evaluate(mols)
    fr = [rep.atom_stability, rep.mol_stability, rep.validity, rep.uniqueness]
    out_of_range = sum(not 0.0 <= f <= 1.0 for f in fr)
    implied = sum(M.mol_stability(m) and M.atom_stability(m) != 1.0 for m in mols)
    yield report("metrics.fraction_ranges_and_stability_implication", out_of_range + implied, 0, len(mols), seed)
    ch4 = template_molecule("CH4")
    r = random_rotation([seed, 999]).numpy()
    batch = [ch4, Molecule(ch4.coords @ r.T, ch4.atom_types, ch4.charges), template_molecule("H2O"), template_molecule("CH3OH")]
    yield report("metrics.uniqueness_with_duplicates", abs(M.uniqueness(batch) - 0.75), 0, 4, seed)


def _reproducibility_checks(seed):
    """Tiny training runs: identical configs give identical files; resume replays; checkpoints round-trip."""
    from . import checkpoint
    from .config import RunConfig
    from .train import train

    tiny = dict(noise_draws=2, T=8, egnn_hidden=8, egnn_channels=3, egnn_layers=1, width=16, depth=1, heads=2,
                batch=4, synth_n=6, steps=6, ckpt_every=3, seed=seed, data_seed=seed)
    with tempfile.TemporaryDirectory() as d:
        runs = []
        for name in ("a", "b"):
            cfg = RunConfig(**tiny, out=str(Path(d) / name)).validate()
            train(cfg)
            runs.append((Path(cfg.out) / "metrics.csv").read_bytes())
        yield report("cli.deterministic_metrics", 0 if runs[0] == runs[1] else 1, 0, 2, seed)

        half = RunConfig(**tiny, out=str(Path(d) / "c")).validate()
        train(half, until=4)
        train(half, resume=str(Path(half.out) / "ckpt_000003.fdckpt"))
        same = (Path(half.out) / "metrics.csv").read_bytes() == runs[0]
        yield report("cli.resume_matches_uninterrupted", 0 if same else 1, 0, 1, seed)

        cfg = RunConfig(**tiny, out=str(Path(d) / "a")).validate()
        _, blocks = checkpoint.load(Path(cfg.out) / "last.fdckpt")
        torch.manual_seed(seed + 1)
        model = FrameDiffusionModel(cfg.paradigm, **cfg.model_kwargs())
        checkpoint.restore(blocks, model)
        p = Path(d) / "again.fdckpt"
        checkpoint.save(p, cfg.to_text(), model)
        _, again = checkpoint.load(p)
        dev = max(float(np.abs(blocks[k] - again[k]).max()) for k in again if k.startswith("param/"))
        yield report("cli.checkpoint_roundtrip", dev, 0, len(again), seed)


SUITES = {
    "equivariance": (_geom_checks, _molkit_checks, _equinet_checks, _backbone_checks, _diffusion_equivariance_checks),
    "gradients": (lambda s: gradient_reports(s),),
    "schedule": (_schedule_checks,),
    "metrics": (_metrics_checks,),
    "reproducibility": (_reproducibility_checks,),
}


def run_suite(which: str = "all", seed: int = 0) -> list[OracleReport]:
    """Run a named sub-suite (or ``all``); reports come back in declaration order."""
    names = list(SUITES) if which == "all" else [which]
    for n in names:
        if n not in SUITES:
            raise ValueError(f"unknown suite {which!r}; choose from {list(SUITES) + ['all']}")
    reports = []
    for n in names:
        with torch.set_grad_enabled(n == "gradients"):
            for check in SUITES[n]:
                reports.extend(check(seed))
    return reports


def suite_ok(reports: list[OracleReport]) -> bool:
    return all(r.ok for r in reports)
