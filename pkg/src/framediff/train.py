"""Training loop, dataset preparation and sampling helpers behind the CLI."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig, parse_config_text
from .diffusion import FrameDiffusionModel, build_schedule, ifd_canonicalize, sample, training_loss
from .molkit import MolBatch, atom_count_histogram, collate, read_xyz, sample_atom_counts, synth_toy_dataset, uncollate

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "loss", "diff_loss", "align_loss", "grad_norm", "frames_degenerate_count"]


def build_model(cfg: RunConfig) -> FrameDiffusionModel:
    torch.manual_seed(cfg.seed)
    return FrameDiffusionModel(cfg.paradigm, **cfg.model_kwargs())


def load_dataset(cfg: RunConfig):
    if cfg.data:
        return read_xyz(cfg.data)
    return synth_toy_dataset(cfg.synth_n, cfg.data_seed)


def step_generator(seed: int, step: int) -> torch.Generator:
    # one stream per step so resumed runs replay the same draws
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def batch_indices(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), int(step)])
    if batch >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch, replace=False))


@dataclass
class TrainState:
    model: FrameDiffusionModel
    optimizer: torch.optim.Optimizer
    data: MolBatch
    histogram: dict[int, float]
    step: int = 0


def prepare(cfg: RunConfig) -> TrainState:
    model = build_model(cfg)
    mols = load_dataset(cfg)
    if not mols:
        raise ValueError("training set is empty")
    data = collate(mols)
    if cfg.paradigm == "ifd":
        with torch.no_grad():
            data, flags = ifd_canonicalize(model, data)
        if bool(flags.any()):
            log.info("ifd canonicalisation: %d degenerate frames (identity used)", int(flags.sum()))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return TrainState(model, opt, data, atom_count_histogram(mols))


def histogram_extra(hist: dict[int, float]) -> dict[str, np.ndarray]:
    keys = sorted(hist)
    return {"hist_counts": np.array(keys, dtype=np.int64), "hist_weights": np.array([hist[k] for k in keys])}


def histogram_from_blocks(blocks) -> dict[int, float]:
    return {int(k): float(w) for k, w in zip(blocks["extra/hist_counts"], blocks["extra/hist_weights"])}


def learning_rate(cfg: RunConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.lr


def train_step(cfg: RunConfig, st: TrainState, schedule) -> tuple:
    """One optimiser step; each selected molecule gets ``noise_draws`` independent (t, eps) draws."""
    step = st.step + 1
    idx = torch.as_tensor(batch_indices(len(st.data), cfg.batch, cfg.seed, step)).repeat(cfg.noise_draws)
    lb = training_loss(st.model, st.data.index(idx), schedule, step_generator(cfg.seed, step))
    st.optimizer.zero_grad(set_to_none=True)
    lb.total.backward()
    params = [p for p in st.model.parameters() if p.grad is not None]
    grad_norm = float(torch.sqrt(sum((p.grad**2).sum() for p in params)))
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    for group in st.optimizer.param_groups:
        group["lr"] = learning_rate(cfg, step)
    st.optimizer.step()
    st.step = step
    return lb, grad_norm


def _truncate_csv(path: Path, step: int) -> None:
    """Drop rows logged after ``step`` (written before an interruption, past the last checkpoint)."""
    if not path.exists():
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = rows[:1] + [r for r in rows[1:] if int(r[0]) <= step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def train(cfg: RunConfig, resume: str | None = None, progress: bool = False, until: int | None = None) -> TrainState:
    """Train towards ``cfg.steps`` total steps, writing metrics.csv, timing.csv and checkpoints to ``cfg.out``.

    ``until`` stops early (an interruption); a later call with ``resume``
    continues the same schedule and reproduces the uninterrupted run exactly.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    st = prepare(cfg)
    schedule = build_schedule(cfg.T)
    mode = "w"
    if resume:
        _, blocks = checkpoint.load(resume)
        st.step = checkpoint.restore(blocks, st.model, st.optimizer)
        mode = "a"
        for name in ("metrics.csv", "timing.csv"):
            _truncate_csv(out / name, st.step)
    (out / "config.txt").write_text(cfg.to_text())
    mf = open(out / "metrics.csv", mode, newline="")
    tf = open(out / "timing.csv", mode, newline="")
    mw, tw = csv.writer(mf), csv.writer(tf)
    if mode == "w":
        mw.writerow(METRIC_COLUMNS)
        tw.writerow(["step", "wall_seconds"])
    start = time.perf_counter()
    try:
        with torch.enable_grad():
            while st.step < min(cfg.steps, until or cfg.steps):
                lb, grad_norm = train_step(cfg, st, schedule)
                mw.writerow([st.step, repr(lb.total.item()), repr(lb.diff_loss.item()), repr(lb.align_loss.item()),
                             repr(grad_norm), lb.degenerate])
                tw.writerow([st.step, f"{time.perf_counter() - start:.3f}"])
                if progress and st.step % 100 == 0:
                    log.info("step %d loss %.4f", st.step, lb.total.item())
                if st.step % cfg.ckpt_every == 0 or st.step == cfg.steps:
                    save_checkpoint(out / f"ckpt_{st.step:06d}.fdckpt", cfg, st)
                    save_checkpoint(out / "last.fdckpt", cfg, st)
    finally:
        mf.close()
        tf.close()
    return st


def save_checkpoint(path, cfg: RunConfig, st: TrainState) -> None:
    checkpoint.save(path, cfg.to_text(), st.model, st.optimizer, st.step, histogram_extra(st.histogram))


def load_model(path) -> tuple[RunConfig, FrameDiffusionModel, dict[int, float]]:
    text, blocks = checkpoint.load(path)
    cfg = RunConfig().updated(parse_config_text(text))
    model = FrameDiffusionModel(cfg.paradigm, **cfg.model_kwargs())
    checkpoint.restore(blocks, model)
    return cfg, model, histogram_from_blocks(blocks)


def generate(model: FrameDiffusionModel, cfg: RunConfig, hist: dict[int, float], n: int, seed: int,
             chunk: int = 64):
    """Sample ``n`` molecules in chunks; returns (molecules, stats dict)."""
    schedule = build_schedule(cfg.T)
    counts = sample_atom_counts(hist, n, seed)
    mols, trajectories = [], []
    for k, lo in enumerate(range(0, n, chunk)):
        res = sample(model, schedule, counts[lo : lo + chunk], seed=seed * 7919 + k)
        mols.extend(uncollate(res.batch))
        trajectories.append({"molecules": len(res.batch), "frame_calls": res.frame_calls,
                             "seconds": res.seconds, "degenerate_steps": res.degenerate_steps})
    total = sum(t["seconds"] for t in trajectories)
    stats = {"paradigm": cfg.paradigm, "T": cfg.T, "samples": n, "seconds_per_sample": total / max(n, 1),
             "trajectories": trajectories}
    return mols, stats


def write_stats(path, stats: dict) -> None:
    Path(path).write_text(json.dumps(stats, indent=2) + "\n")


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in METRIC_COLUMNS}
