"""Command line entry point: ``python -m lff <command> [options]``.

Commands: gen-data, train, sample, ablate, metrics, selftest. Every command
resolves the configuration (defaults, then ``--config`` JSON, then
``--set section.key=value`` and the dedicated flags, then ``LFF_SEED``),
validates it, and writes ``run.json`` into the output directory.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from lff.config import ExperimentConfig, apply_override, resolve
from lff.errors import ConfigError

log = logging.getLogger("lff")

# dedicated flags -> config keys
_FLAG_KEYS = {
    "seed": "seed",
    "variant": "variant",
    "lr": "train.lr",
    "steps": "train.steps",
    "precision": "train.precision",
    "frames": "window.total",
    "window": "window.length",
    "overlap": "window.overlap",
    "scheme": "window.scheme",
    "strategy": "window.strategy",
    "guidance": "guidance.mode",
    "alpha": "guidance.alpha",
    "beta": "guidance.beta",
    "sample_steps": "sampler.steps",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lff", description="Toy long-form audio-driven video diffusion harness.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("gen-data", help="write synthetic training and validation scenes")
    common(sp)

    sp = sub.add_parser("train", help="train a model; writes checkpoint and metrics.csv")
    common(sp)
    sp.add_argument("--data", help="scene directory from gen-data (default: generate in memory)")
    sp.add_argument("--variant")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--precision", choices=["float32", "float64"])

    sp = sub.add_parser("sample", help="long rollout with sliding windows; writes latents, frames, drift.csv")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--variant")
    sp.add_argument("--rollout-seed", type=int, default=0)
    sp.add_argument("--frames", type=int, help="total latent frames L")
    sp.add_argument("--window", type=int, help="window length l")
    sp.add_argument("--overlap", type=int, help="overlap m")
    sp.add_argument("--scheme", choices=["logarithmic", "fixed", "uniform", "hard"])
    sp.add_argument("--strategy", choices=["dwsw", "plain_window", "motion_frame"])
    sp.add_argument("--guidance", choices=["native", "cfg", "off"])
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--sample-steps", type=int, dest="sample_steps")
    sp.add_argument("--no-frames", action="store_true", help="skip PPM frame dumps")

    sp = sub.add_parser("ablate", help="run the ablation grid; writes ablation.csv and weighting.csv")
    common(sp)
    sp.add_argument("--checkpoints", help="directory holding one checkpoint subdirectory per variant")

    sp = sub.add_parser("metrics", help="recompute drift.csv from a sample output directory")
    common(sp, out_required=False)
    sp.add_argument("--run", required=True, help="directory written by `sample`")

    sp = sub.add_parser("selftest", help="run the built-in invariant checks")
    common(sp, out_required=False)
    return p


def _resolve(args) -> ExperimentConfig:
    overrides = list(args.set)
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return resolve(args.config, overrides)


def _write_run_json(out: Path, args, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": args.command, "argv": sys.argv[1:], "config": cfg.to_dict(), **(extra or {})}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    from lff.data import save_scene, write_manifest
    from lff.train import training_scenes, validation_scenes

    out = Path(args.out)
    entries = []
    for split, scenes in (("train", training_scenes(cfg)), ("val", validation_scenes(cfg))):
        for i, sc in enumerate(scenes):
            e = save_scene(out, sc, cfg.seed, f"{split}{i}")
            e["split"] = split
            entries.append(e)
    write_manifest(out, entries, {"seed": cfg.seed})
    print(f"wrote {len(entries)} scenes to {out}")
    return 0


def _load_split(directory) -> tuple[list, list]:
    from lff.data import load_scene

    doc = json.loads((Path(directory) / "manifest.json").read_text())
    train = [load_scene(directory, e) for e in doc["scenes"] if e.get("split", "train") == "train"]
    val = [load_scene(directory, e) for e in doc["scenes"] if e.get("split") == "val"]
    return train, val or None


def cmd_train(args, cfg: ExperimentConfig) -> int:
    from lff.train import init_state, save_checkpoint, train_loop, write_metrics

    out = Path(args.out)
    scenes, val = _load_split(args.data) if args.data else (None, None)
    state = init_state(cfg)
    save_checkpoint(out / "checkpoint_init", state.params, 0, {"variant": cfg.variant})
    result = train_loop(cfg, scenes, val, state=state)
    save_checkpoint(out / "checkpoint", result.state.params, result.state.step,
                    {"variant": cfg.variant, "validation": result.validation})
    write_metrics(out / "metrics.csv", result.state.history)
    v0, v1 = result.validation[0][1], result.validation[-1][1]
    print(f"trained {result.state.step} steps in {result.seconds:.1f}s; validation MSE {v0:.4f} -> {v1:.4f}")
    return 0


def cmd_sample(args, cfg: ExperimentConfig) -> int:
    from lff.data import decode, write_frame_image, write_tensor
    from lff.pipeline import load_model, rollout

    out = Path(args.out)
    model = load_model(args.checkpoint, cfg, args.variant)
    t0 = time.perf_counter()
    r = rollout(model, cfg, args.rollout_seed)
    write_tensor(out / "latents.tnsr", r.latents)
    write_tensor(out / "amplitude.tnsr", r.scene.amplitude)
    write_tensor(out / "lip_mask.tnsr", r.scene.lip_mask)
    if not args.no_frames:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        for i, f in enumerate(decode(r.latents)):
            write_frame_image(frames / f"frame_{i:04d}.ppm", f)
    r.report.write_csv(out / "drift.csv")
    f = r.report.final
    print(f"sampled {r.latents.shape[0]} frames in {time.perf_counter() - t0:.1f}s; final clip "
          f"mean_shift {f.mean_shift:.4f} ciede {f.ciede:.3f} sync_r {f.sync_r:.3f}")
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    from lff.pipeline import GRID_FIELDS, ablation_grid, checkpoint_dirs, rows_to_csv, weighting_rows

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = weighting_rows(cfg)
    (out / "weighting.csv").write_text(rows_to_csv(weights, ("scheme", "seam_discontinuity")))
    dirs = checkpoint_dirs(cfg, args.checkpoints)
    rows = ablation_grid(cfg, dirs, lambda *cell: log.info("done %s", cell))
    (out / "ablation.csv").write_text(rows_to_csv(rows, GRID_FIELDS))
    print(f"wrote {len(rows)} ablation rows and {len(weights)} weighting rows to {out}")
    return 0


def cmd_metrics(args, cfg: ExperimentConfig) -> int:
    from lff.data import read_tensor
    from lff.metrics import drift_report

    run = Path(args.run)
    rep = drift_report(read_tensor(run / "latents.tnsr"), read_tensor(run / "amplitude.tnsr"),
                       read_tensor(run / "lip_mask.tnsr"), cfg.clip_len)
    rep = _bucketed(rep, cfg)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "drift.csv")
    print(rep.to_csv(), end="")
    return 0


def _bucketed(rep, cfg: ExperimentConfig):
    """Keep only clips inside the configured frame-range buckets, when any are set."""
    if not cfg.metrics.buckets:
        return rep
    cl = cfg.clip_len
    keep = [r for r in rep.records if any(lo <= r.clip * cl and (r.clip + 1) * cl <= hi for lo, hi in cfg.metrics.buckets)]
    return type(rep)(keep, rep.config)


def cmd_selftest(args, cfg: ExperimentConfig) -> int:
    from lff.selftest import run_all

    failures = run_all(verbose=True)
    return 1 if failures else 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "metrics": cmd_metrics,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
        errs = cfg.validate()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    if errs:
        print("configuration error:", file=sys.stderr)
        for e in errs:
            print(f"  {e}", file=sys.stderr)
        return 2
    out = getattr(args, "out", None)
    if out is None and args.command == "metrics":
        out = args.run
    if out is not None:
        _write_run_json(Path(out), args, cfg)
    try:
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"{args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported with context, nonzero exit
        print(f"{args.command} failed in {type(exc).__module__}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
