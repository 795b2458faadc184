"""Command line: ``layoutgen {gen-data,train-vq,train-ar,sample,eval}``.

Exit status 0 on success, 2 for an inconsistent configuration (the message
names the violated invariant), 3 when a stage's input artifact is missing,
4 for an unreadable or corrupted checkpoint.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, bundled_config, load_config
from .errors import CheckpointError, ConfigError, ContractError

EXIT_CONFIG = 2
EXIT_MISSING_STAGE = 3
EXIT_CHECKPOINT = 4

COMMANDS = ("gen-data", "train-vq", "train-ar", "sample", "eval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layoutgen", description="Layout-conditioned two-stage image synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="config file, or the name of a bundled config (desk, smoke); default: desk")
        p.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
        p.add_argument("--out", required=True, type=Path, help="run directory shared by all stages")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name in ("train-vq", "train-ar"):
            p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint if present")
            p.add_argument("--stop-at", type=int, default=None, metavar="STEP",
                           help="checkpoint and exit after STEP (the schedule still targets the configured steps)")
        if name == "sample":
            p.add_argument("--layout", default="test-split", help='annotation file, or "test-split"')
            p.add_argument("--temperature", type=float, default=None)
            p.add_argument("--top-k", type=int, default=None)
            p.add_argument("--grid", default=None, help="<H>x<W> latent grid; larger than training grid = sliding window")
        if name == "eval":
            p.add_argument("--real", type=Path, default=None, help="data directory or annotation file (test split)")
            p.add_argument("--fake", type=Path, default=None, help="sample directory")
    return parser


def resolve_config(args) -> RunConfig:
    source = args.config or "desk"
    path = Path(source)
    if not path.is_file() and bundled_config(source).is_file():
        path = bundled_config(source)
    if not path.is_file():
        raise ConfigError("config file exists", str(source))
    cfg = load_config(path)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("--set takes KEY=VALUE", item)
        cfg.set(key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.command == "sample":
        if args.temperature is not None:
            cfg.sample.temperature = args.temperature
        if args.top_k is not None:
            cfg.sample.top_k = args.top_k
    cfg.validate()
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        grid = pipeline.parse_grid(args.grid) if getattr(args, "grid", None) else None
    except (ConfigError, ContractError) as exc:
        print(f"layoutgen: inconsistent configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / f"resolved_{args.command}.cfg").write_text(cfg.dump())
    try:
        if args.command == "gen-data":
            records = pipeline.gen_data(cfg, out)
            print(f"wrote {len(records)} scenes to {pipeline.data_dir(out)}")
        elif args.command == "train-vq":
            state = pipeline.train_vq(cfg, out, resume=args.resume, stop_at=args.stop_at)
            print(f"stage 1 trained to step {state.trainer.step_count}: {pipeline.vq_checkpoint_path(out)}")
        elif args.command == "train-ar":
            state = pipeline.train_ar(cfg, out, resume=args.resume, stop_at=args.stop_at)
            print(f"stage 2 trained to step {state.step}: {pipeline.ar_checkpoint_path(out)}")
        elif args.command == "sample":
            paths = pipeline.run_sample(cfg, out, cfg.seed, args.layout, grid)
            print(f"wrote {len(paths)} samples to {out / 'samples'}")
        elif args.command == "eval":
            print(json.dumps(pipeline.evaluate(cfg, out, args.real, args.fake), sort_keys=True))
    except pipeline.MissingStageError as exc:
        print(f"layoutgen: {exc}", file=sys.stderr)
        return EXIT_MISSING_STAGE
    except CheckpointError as exc:
        print(f"layoutgen: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
