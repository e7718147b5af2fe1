"""Command line entry point: ``shufflecam {train,genmask,eval,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .cam import NonFiniteLossError
from .config import ConfigError, RunConfig, load_config, parse_pairs, with_overrides

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("shufflecam")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="training seed (training.seed)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--threshold", type=float, metavar="TAU", help="CAM threshold (eval.threshold)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shufflecam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier and write a run record")
    _common(p)
    p.add_argument("--variant", choices=harness.VARIANT_NAMES, help="train one ablation arm")

    p = sub.add_parser("genmask", help="write pseudo masks and CAM dumps for a split")
    _common(p)
    p.add_argument("--variant", choices=harness.VARIANT_NAMES)
    p.add_argument("--checkpoint", metavar="PATH", help="defaults to OUT/checkpoint.ckpt")
    p.add_argument("--split", choices=("val", "test"))
    p.add_argument("--cam", choices=("refined", "raw"))

    p = sub.add_parser("eval", help="score a mask directory against ground truth")
    _common(p)
    p.add_argument("--variant", choices=harness.VARIANT_NAMES)
    p.add_argument("--masks", metavar="DIR", help="defaults to OUT/masks_<split>")
    p.add_argument("--gt", metavar="DIR", help="ground-truth PNG directory; defaults to the dataset masks")
    p.add_argument("--tag", default="", help="row label in comparison.csv")

    p = sub.add_parser("ablate", help="train and score several variants over shared seeds")
    _common(p)
    p.add_argument("--variant", action="append", choices=harness.VARIANT_NAMES,
                   help="variant to include, repeatable (default: ablate.variants)")
    p.add_argument("--seeds", help="comma-separated seed list (default: ablate.seeds)")
    p.add_argument("--workers", type=int, help="parallel processes")

    p = sub.add_parser("report", help="emit plot-ready CSVs from a record directory")
    _common(p)
    p.add_argument("--composites", type=int, default=0, metavar="N",
                   help="also write N image/gt/mask side-by-side PNGs")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = dict(parse_pairs("\n".join(args.set)))
    if args.seed is not None:
        overrides["training.seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.threshold is not None:
        overrides["eval.threshold"] = args.threshold
    if getattr(args, "workers", None) is not None:
        overrides["ablate.workers"] = args.workers
    if args.config:
        try:
            cfg = load_config(args.config, overrides)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    else:
        cfg = with_overrides(RunConfig(), overrides)
    variant = getattr(args, "variant", None)
    if isinstance(variant, str):
        cfg = harness.variant_config(cfg, variant)
    return cfg


def run(args) -> int:
    cfg = resolve_config(args)
    if args.command == "train":
        record = harness.cmd_train(cfg)
        print(f"trained {len(record.losses)} iterations; record in {cfg.out}")
    elif args.command == "genmask":
        d = harness.cmd_genmask(cfg, args.checkpoint, args.split, args.cam)
        print(f"masks written to {d}")
    elif args.command == "eval":
        report = harness.cmd_eval(cfg, args.masks, args.gt, args.tag)
        print(report.to_text(), end="")
    elif args.command == "ablate":
        seeds = None
        if args.seeds:
            try:
                seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
            except ValueError as exc:
                raise ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from exc
        summary = harness.cmd_ablate(cfg, args.variant, seeds)
        for variant, runs, dice, iou in summary:
            print(f"{variant:14s} runs={runs} median_dice={dice:.4f} median_iou={iou:.4f}")
    elif args.command == "report":
        for p in harness.cmd_report(cfg.out, args.composites, cfg):
            print(p)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
