"""Command-line entry point: ``kqgc {gen,train-kge,train-kqgc,eval,export,pipeline}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .checkpoint import CheckpointFormatError
from .config import ConfigError, load_config
from .graph import KgFormatError
from .synthgen import SpecError
from .transe import TrainingDivergedError

log = logging.getLogger("kqgc")

_AGG_CHOICES = ("mean", "attn1", "attn2")


def _setup_logging() -> None:
    level = os.environ.get("KQGC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--preset", choices=("paper", "desk"), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--aggregator", choices=_AGG_CHOICES)
    common.add_argument("--layers", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")

    p = argparse.ArgumentParser(prog="kqgc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write a synthetic KG, labels and baseline features")
    s = sub.add_parser("train-kge", parents=[common], help="pre-train TransE")
    s.add_argument("--checkpoint", help="resume from this TransE checkpoint")
    s = sub.add_parser("train-kqgc", parents=[common], help="train the convolution on a frozen TransE table")
    s.add_argument("--checkpoint", help="TransE checkpoint to use as input")
    s.add_argument("--resume", help="resume from this parameter file")
    sub.add_parser("eval", parents=[common], help="per-brand PR-AUC report and figures")
    s = sub.add_parser("export", parents=[common], help="export an embedding checkpoint")
    s.add_argument("--checkpoint", required=True, help="embedding checkpoint to export")
    s.add_argument("--format", choices=("tsv", "bin"), default="tsv")
    sub.add_parser("pipeline", parents=[common], help="gen, train-kge, train-kqgc, eval")
    return p


def _overrides(args) -> dict:
    ov = {"seed": args.seed, "out": args.out, "layers": args.layers}
    if args.aggregator:
        ov["aggregator"] = args.aggregator
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    return ov


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, _overrides(args))
        if args.command == "gen":
            for path in pipeline.run_gen(cfg):
                print(path)
        elif args.command == "train-kge":
            print(pipeline.run_train_kge(cfg, resume=args.checkpoint))
        elif args.command == "train-kqgc":
            for path in pipeline.run_train_kqgc(cfg, kge_checkpoint=args.checkpoint, resume=args.resume):
                print(path)
        elif args.command == "eval":
            pipeline.run_eval(cfg)
            print((pipeline.report_dir(cfg) / "report.txt").read_text(), end="")
        elif args.command == "export":
            out = args.out or str(cfg.out_dir / "export")
            print(pipeline.export_embeddings(args.checkpoint, out, args.format))
        elif args.command == "pipeline":
            pipeline.run_pipeline(cfg)
            print((pipeline.report_dir(cfg) / "report.txt").read_text(), end="")
    except (ConfigError, SpecError, KgFormatError, CheckpointFormatError, TrainingDivergedError,
            FileNotFoundError, ValueError) as exc:
        print(f"kqgc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
