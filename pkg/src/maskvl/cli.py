"""Command-line entry point: ``maskvl <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import train
from .checkpoint import CheckpointError
from .config import Config, ConfigError, load_config
from .data import export_jsonl, generate_synthetic

logger = logging.getLogger("maskvl")


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/pretrain.ckpt")
    res = train.run_pretrain(cfg, out=out, resume=args.resume, init=args.init)
    print(f"wrote {out} (step {res.checkpoint.step})")
    return 0


def cmd_pretrain_mim(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/pretrain-mim.ckpt")
    train.pretrain_mim_only(cfg, out=out)
    print(f"wrote {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out(args, f"runs/finetune-{args.task}.ckpt")
    res = train.run_finetune(args.task, cfg, init=args.init, out=out)
    for k, v in res.metrics.items():
        print(f"{k}\t{v:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    metrics = train.run_eval(args.checkpoint, _out(args, "runs/eval"), seed=args.seed, n_items=args.items)
    for k, v in metrics.items():
        print(f"{k}\t{v:.4f}")
    return 0


def cmd_probe(args) -> int:
    paths = train.run_probe(args.kind, args.checkpoint, _out(args, f"runs/probe-{args.kind}"),
                            n_images=args.images, seed=args.seed, k=args.k,
                            nouns=args.nouns.split(",") if args.nouns else None,
                            similarity=args.similarity)
    for p in paths:
        print(p)
    return 0


def cmd_gen_data(args) -> int:
    records = generate_synthetic(args.n, 0 if args.seed is None else args.seed, args.image_size)
    manifest = export_jsonl(records, _out(args, "data/synthetic"))
    print(f"wrote {len(records)} records to {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="maskvl", description="Masked vision-language pretraining at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="multimodal pretraining")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--init", help="image-only checkpoint to warm-start from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("pretrain-mim", parents=[common], help="image-only masked reconstruction warm start")
    p.set_defaults(func=cmd_pretrain_mim)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune on a downstream task")
    p.add_argument("task", choices=train.TASKS)
    p.add_argument("--init", help="pretraining checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="write a metrics TSV for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--items", type=int, default=128)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", parents=[common], help="heatmaps, patch clusters or noun similarity")
    p.add_argument("kind", choices=train.PROBE_KINDS)
    p.add_argument("checkpoint")
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--k", type=int, default=4, help="clusters per image")
    p.add_argument("--nouns", help="comma-separated nouns for nounsim")
    p.add_argument("--similarity", default="cosine", choices=("cosine", "centered-cosine", "attention"))
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gen-data", parents=[common], help="export synthetic images and a JSONL manifest")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
