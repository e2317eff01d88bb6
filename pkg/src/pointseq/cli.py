"""Command line entry points.

Subcommands: generate, pretrain, finetune, ablate, probe, inspect-checkpoint.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import encoder as enc
from . import train


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key (dotted path)")


def _load(args, task: str | None = None) -> train.RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"out_dir={json.dumps(args.out_dir)}")
    if task is not None:
        overrides.append(f"task={json.dumps(task)}")
    return train.load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointseq",
        description="Point-cloud sequence pretraining: serialization, hybrid "
                    "SSM/latent-attention encoding, diffusion denoising.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic shape dataset")
    _add_run_args(p)

    p = sub.add_parser("pretrain", help="diffusion pretraining on masked tokens")
    _add_run_args(p)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint or scratch")
    _add_run_args(p)
    p.add_argument("--checkpoint", default=None, help="backbone checkpoint to start from")
    p.add_argument("--segmentation", action="store_true", help="part segmentation task")

    p = sub.add_parser("ablate", help="sweep one design axis and tabulate")
    _add_run_args(p)
    p.add_argument("--axis", required=True, choices=train.ABLATION_AXES)

    p = sub.add_parser("probe", help="gate/state correlation diagnostic")
    _add_run_args(p)
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("inspect-checkpoint", help="list checkpoint contents")
    p.add_argument("path")
    return parser


def inspect_checkpoint(path: str) -> None:
    arrays = enc.load_checkpoint(path)
    total = 0
    for name in sorted(arrays):
        arr = arrays[name]
        total += arr.size
        print(f"{name:60s} {str(arr.dtype):8s} {tuple(arr.shape)}")
    print(f"{len(arrays)} entries, {total} scalars ({total / 1e6:.2f}M)")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = _load(args)
            manifest = train.generate(cfg)
            print(f"dataset manifest: {manifest}")
        elif args.command == "pretrain":
            cfg = _load(args, task="pretrain")
            result = train.pretrain(cfg)
            print(json.dumps(result, sort_keys=True))
        elif args.command == "finetune":
            task = "finetune_seg" if args.segmentation else "finetune_cls"
            cfg = _load(args, task=task)
            result = train.finetune(cfg, checkpoint=args.checkpoint)
            print(json.dumps(result, sort_keys=True))
        elif args.command == "ablate":
            cfg = _load(args, task="finetune_cls")
            rows = train.ablate(cfg, args.axis)
            for row in rows:
                print(f"{row['axis']:10s} {row['cell']:22s} {row['task']:14s} "
                      f"{row['metric'] if row['metric'] != '' else row['error']}")
        elif args.command == "probe":
            cfg = _load(args, task="probe")
            rep = train.probe(cfg, checkpoint=args.checkpoint)
            print(json.dumps({"mean_correlation": rep["mean_correlation"],
                              "mean_abs_correlation": rep["mean_abs_correlation"]},
                             sort_keys=True))
        elif args.command == "inspect-checkpoint":
            inspect_checkpoint(args.path)
    except train.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except train.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
