"""Command-line entry point: ``semstack {verify,gen,train,eval,compare}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import commands
from .config import ConfigError, ExperimentConfig, load_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON); defaults apply when omitted")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed-override", type=int, default=None,
                   help="replace the dataset/train/verify seed with this value (compare: dataset seed only)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for compare cells (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semstack", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("verify", help="Monte Carlo / closed-form checks of the stacking statistics")
    _common(p)
    p.add_argument("--fault", choices=["skip-sqrt-n"], help=argparse.SUPPRESS)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    _common(p)

    p = sub.add_parser("train", help="train one model (mode and seed from the config's train section)")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory written by `gen` (regenerated from config if omitted)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", default="test_source", choices=["train", "test_source", "test_target"])
    p.add_argument("--data", type=Path)
    p.add_argument("--oracle", action="store_true", help="debug: score the ground truth against itself")

    p = sub.add_parser("compare", help="train and evaluate every (mode, seed) cell; write comparison tables")
    _common(p)
    return parser


def _apply_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    return replace(cfg, dataset=replace(cfg.dataset, seed=seed), train=replace(cfg.train, seed=seed))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.verb == "verify":
        return commands.cmd_verify(args.out or Path("runs/verify"), args.seed_override or 0, args.fault)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return commands.CONFIG_ERROR
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return commands.IO_ERROR
    if args.verb != "compare":
        cfg = _apply_seed(cfg, args.seed_override)
    elif args.seed_override is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, seed=args.seed_override))
    out = args.out or Path(cfg.output_dir)
    if args.verb == "gen":
        return commands.cmd_gen(cfg, out)
    if args.verb == "train":
        return commands.cmd_train(cfg, out, args.data)
    if args.verb == "eval":
        return commands.cmd_eval(cfg, args.checkpoint, args.split, out, args.data, args.oracle)
    code, report = commands.cmd_compare(cfg, out, args.threads)
    if report:
        print("\n".join(report))
    return code


if __name__ == "__main__":
    raise SystemExit(main())
