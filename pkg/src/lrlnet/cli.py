"""Command-line surface: gen, train, eval, ablate, dump-regions."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import ArgumentError, CheckpointError, ConfigError, ParseError


def _read_config(path) -> harness.RunConfig:
    return harness.parse_config(Path(path).read_text(encoding="utf-8"))


def _sidecar_config(checkpoint, explicit) -> harness.RunConfig:
    if explicit is not None:
        return _read_config(explicit)
    sidecar = Path(checkpoint).parent / "config.txt"
    if not sidecar.exists():
        raise ConfigError(
            f"no --config given and no sidecar found at {sidecar}; "
            "pass --config with the run configuration"
        )
    return _read_config(sidecar)


def _cmd_gen(args) -> int:
    ds = harness.generate_synthetic(args.classes, args.per_class, args.points,
                                    args.noise, args.clutter == "on", args.seed)
    harness.save_dataset(ds, args.out)
    print(f"wrote {len(ds.clouds)} clouds ({ds.num_classes} classes, "
          f"{args.points} points each) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    run = _read_config(args.config)
    result = harness.train(run, args.out)
    last = result.history[-1] if result.history else None
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if last:
        print(f"final epoch {last['epoch']}: train_loss={last['train_loss']:.4f} "
              f"test_acc={last['test_acc']:.4f} test_macc={last['test_macc']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    run = _sidecar_config(args.checkpoint, args.config)
    if args.data is not None:
        run.data = args.data
    ds = harness.get_dataset(run)
    result = harness.evaluate_checkpoint(args.checkpoint, run, ds, args.split)
    print(f"acc={result.acc:.4f} macc={result.macc:.4f} (split={args.split}, "
          f"{int(result.confusion.sum())} objects)")
    print("confusion (rows = truth):")
    with np.printoptions(linewidth=200):
        print(result.confusion)
    return 0


def _cmd_ablate(args) -> int:
    run = _read_config(args.config)
    entries = harness.parse_grid(Path(args.grid).read_text(encoding="utf-8"))
    rows = harness.ablation_grid(run, entries, args.out)
    width = max(len(r["name"]) for r in rows)
    print(f"{'name'.ljust(width)}  {'acc':>7}  {'macc':>7}  {'d_acc':>7}  {'d_macc':>7}")
    for r in rows:
        print(f"{r['name'].ljust(width)}  {r['acc']:7.4f}  {r['macc']:7.4f}  "
              f"{r['delta_acc']:+7.4f}  {r['delta_macc']:+7.4f}")
    print(f"table written to {Path(args.out) / 'ablation.csv'}")
    return 0


def _cmd_dump_regions(args) -> int:
    run = _sidecar_config(args.checkpoint, args.config)
    if args.data is not None:
        run.data = args.data
    ds = harness.get_dataset(run)
    model = harness.load_model(args.checkpoint, run, ds.num_classes)
    n = harness.dump_regions(model, ds, args.cloud, run.seed, args.out)
    print(f"wrote {n} region lines to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrlnet",
        description="Train and inspect the local-region-learning point-cloud classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset file")
    gen.add_argument("--classes", type=int, default=3)
    gen.add_argument("--per-class", type=int, default=100, dest="per_class")
    gen.add_argument("--points", type=int, default=1024)
    gen.add_argument("--noise", type=float, default=0.01)
    gen.add_argument("--clutter", choices=("on", "off"), default="off")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="train from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", default=None)
    ev.add_argument("--split", choices=("train", "test", "all"), default="test")
    ev.add_argument("--config", default=None,
                    help="run config; defaults to config.txt beside the checkpoint")
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="run a module-placement grid")
    ab.add_argument("--config", required=True)
    ab.add_argument("--grid", required=True)
    ab.add_argument("--out", required=True)
    ab.set_defaults(func=_cmd_ablate)

    dr = sub.add_parser("dump-regions", help="dump shifted centers and radii for one cloud")
    dr.add_argument("--checkpoint", required=True)
    dr.add_argument("--cloud", type=int, required=True)
    dr.add_argument("--out", required=True)
    dr.add_argument("--data", default=None)
    dr.add_argument("--config", default=None,
                    help="run config; defaults to config.txt beside the checkpoint")
    dr.set_defaults(func=_cmd_dump_regions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ArgumentError, CheckpointError, ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
