"""``framediff`` command line: synth, train, sample, eval, verify."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, default_seed, load_config
from .molkit import ParseError, read_xyz, synth_toy_dataset, write_xyz

EXIT_USAGE = 2
EXIT_FAILED = 1


def cmd_synth(args) -> int:
    mols = synth_toy_dataset(args.n, args.seed)
    write_xyz(args.out, mols)
    print(f"wrote {len(mols)} molecules to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import read_metrics, smoothed, train

    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    cfg = load_config(args.config, overrides)
    st = train(cfg, resume=args.resume, progress=not args.quiet)
    loss = read_metrics(Path(cfg.out) / "metrics.csv")["loss"]
    w = min(50, len(loss))
    sm = smoothed(loss, w)
    print(f"trained {st.step} steps; smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}; outputs in {cfg.out}")
    return 0


def cmd_sample(args) -> int:
    from .train import generate, load_model, write_stats

    cfg, model, hist = load_model(args.ckpt)
    mols, stats = generate(model, cfg, hist, args.n, args.seed)
    write_xyz(args.out, mols)
    stats_path = args.stats or str(Path(args.out).with_suffix(".stats.json"))
    write_stats(stats_path, stats)
    calls = [t["frame_calls"] for t in stats["trajectories"]]
    print(f"wrote {len(mols)} samples to {args.out}; frame_calls per trajectory {calls}; stats in {stats_path}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    mols = read_xyz(args.samples)
    vlb = None
    if args.ckpt:
        vlb = _vlb(args)
    rep = evaluate(mols, vlb)
    text = rep.format()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _vlb(args) -> float:
    import torch

    from .diffusion import build_schedule, ifd_canonicalize
    from .metrics import vlb_estimate
    from .molkit import collate
    from .train import load_model

    if not args.data:
        raise ConfigError("--ckpt needs --data (reference molecules for the bound)")
    cfg, model, _ = load_model(args.ckpt)
    batch = collate(read_xyz(args.data))
    if cfg.paradigm == "ifd":
        with torch.no_grad():
            batch, _ = ifd_canonicalize(model, batch)
    return vlb_estimate(model, batch, build_schedule(cfg.T), k=args.k, seed=args.seed)


def cmd_verify(args) -> int:
    from .verify import format_table, run_suite, suite_ok

    reports = run_suite(args.suite, args.seed)
    table = format_table(reports)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    ok = suite_ok(reports)
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="framediff", description="Frame-based equivariant diffusion for small molecules.")
    sub = p.add_subparsers(dest="command", required=True)
    seed = default_seed()

    s = sub.add_parser("synth", help="write a synthetic toy dataset as XYZ")
    s.add_argument("--n", type=int, default=32)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; every config key is also a --flag")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--quiet", action="store_true")
    for f in fields(RunConfig):
        typ = {"int": int, "float": float}.get(f.type, str)
        t.add_argument(f"--{f.name}", type=typ, default=None)
    t.set_defaults(func=cmd_train)

    sm = sub.add_parser("sample", help="sample molecules from a checkpoint")
    sm.add_argument("--ckpt", required=True)
    sm.add_argument("--n", type=int, default=64)
    sm.add_argument("--seed", type=int, default=seed)
    sm.add_argument("--out", required=True)
    sm.add_argument("--stats", help="JSON with timing and frame-constructor calls (default: <out>.stats.json)")
    sm.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="stability, validity and uniqueness of an XYZ file")
    e.add_argument("--samples", required=True)
    e.add_argument("--out")
    e.add_argument("--ckpt", help="also estimate the VLB of --data under this checkpoint")
    e.add_argument("--data")
    e.add_argument("--k", type=int, default=8)
    e.add_argument("--seed", type=int, default=seed)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the oracle suite; exit 0 iff all checks pass")
    v.add_argument("--suite", default="all", choices=["equivariance", "gradients", "schedule", "metrics", "reproducibility", "all"])
    v.add_argument("--seed", type=int, default=seed)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"framediff: checkpoint error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ConfigError, ParseError, FileNotFoundError, ValueError) as exc:
        print(f"framediff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
