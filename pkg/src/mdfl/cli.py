"""Command-line entry point: synth | train | encode | match | eval | diag.

Every subcommand requires --config and --out, honors a --seed override,
echoes the fully-resolved config beside its outputs, and exits with
0 on success, 2 on configuration errors, 3 on data errors, and 4 on
numeric failures. On failure the files written by the failed invocation
are removed and a single machine-parsable line goes to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import experiment
from .config import load_config
from .errors import ConfigError, DataError, MdflError, NumericError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdfl",
        description="multi-domain feature learning pipeline for "
                    "conditional place recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, query_help=None, ref=False, features=False,
               checkpoint=None):
        p.add_argument("--config", required=True,
                       help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if query_help:
            p.add_argument("--query", required=True, help=query_help)
        if ref:
            p.add_argument("--ref", required=True,
                           help="reference features file (MDFLF001)")
        if features:
            p.add_argument("--features", required=True,
                           choices=experiment.FEATURE_KINDS,
                           help="feature family to encode")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help=checkpoint)

    common(sub.add_parser("synth",
                          help="generate the synthetic multi-condition "
                               "dataset and its train/test split"))
    p = sub.add_parser("train", help="train the separation model")
    common(p, checkpoint="resume from this checkpoint file")
    p.add_argument("--query", default=None,
                   help="training dataset (default OUT/dataset_train.mdfld)")
    common(sub.add_parser("encode", help="encode a dataset into features"),
           query_help="dataset file (MDFLD001)", features=True,
           checkpoint="trained weights (required for --features caps)")
    common(sub.add_parser("match", help="sequence-match query vs reference"),
           query_help="query features file (MDFLF001)", ref=True)
    common(sub.add_parser("eval",
                          help="build PR curves and the AUC report from "
                               "match CSV files in OUT"))
    common(sub.add_parser("diag",
                          help="mutual-information-vs-step diagnostic "
                               "over saved checkpoints"),
           query_help="dataset file (MDFLD001)",
           checkpoint="checkpoint directory (default OUT/checkpoints)")
    return parser


def _dispatch(args, written: list) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    out = args.out

    if args.command == "synth":
        return experiment.run_synth(cfg, out, written)
    if args.command == "train":
        dataset = args.query or os.path.join(out, "dataset_train.mdfld")

        def progress(step, losses):
            if step % max(1, cfg.checkpoint_every) == 0 or step == cfg.steps:
                print(f"step={step} joint={losses.joint:.4f} "
                      f"cond={losses.cond:.4f} disc={losses.disc:.4f}",
                      flush=True)

        return experiment.run_train(cfg, out, dataset, written, progress,
                                    resume_from=args.checkpoint)
    if args.command == "encode":
        return experiment.run_encode(cfg, out, args.query, args.features,
                                     checkpoint_path=args.checkpoint,
                                     written=written)
    if args.command == "match":
        return experiment.run_match(cfg, out, args.query, args.ref,
                                    written=written)
    if args.command == "eval":
        return experiment.run_eval(cfg, out, written=written)
    if args.command == "diag":
        return experiment.run_diag(cfg, out, args.query,
                                   checkpoint_dir=args.checkpoint,
                                   written=written)
    raise ConfigError(f"unknown command {args.command!r}")


def _cleanup(written: list) -> None:
    for path in written:
        try:
            os.unlink(path)
        except OSError:
            pass


def _summary_line(command: str, result: dict) -> str:
    parts = [f"ok command={command}"]
    for key in ("train", "test", "final_checkpoint", "path", "tag", "n",
                "n_correct", "steps", "mi_first", "mi_last"):
        if key in result:
            parts.append(f"{key}={result[key]}")
    if "paths" in result:
        parts.append("files=" + ";".join(result["paths"].values()))
    if "average_auc" in result:
        for method, val in sorted(result["average_auc"].items()):
            parts.append(f"auc_{method}={val:.4f}")
    return " ".join(str(p) for p in parts)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    written: list[str] = []
    try:
        result = _dispatch(args, written)
    except ConfigError as exc:
        _cleanup(written)
        print(f"error kind=config exit=2: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        _cleanup(written)
        print(f"error kind=numeric exit=4: {exc}", file=sys.stderr)
        return 4
    except (DataError, MdflError, OSError) as exc:
        _cleanup(written)
        print(f"error kind=data exit=3: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        _cleanup(written)
        print(f"error kind=config exit=2: {exc}", file=sys.stderr)
        return 2
    print(_summary_line(args.command, result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
