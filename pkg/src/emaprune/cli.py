"""Command line: ``emaprune {gen-data,train,sweep,verify}``.

Exit status: 0 success, 2 configuration error, 3 run failure, 4 failed
verification.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as E
from .data import CSVFormatError
from .errors import PreconditionError, TrainingAbort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_VERIFY = 4

log = logging.getLogger("emaprune")


def _ratio(text):
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"pruning ratio must lie in [0, 1), got {v}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=_seed)
    common.add_argument("--pruning-ratio", type=_ratio, help="fraction of each batch removed")
    common.add_argument("--scorer", choices=[k.value for k in E.ScorerKind])
    common.add_argument("--beta", type=float, help="EMA pace of the reference model")
    common.add_argument("--mode", choices=["batch", "epoch"], help="selection granularity")
    common.add_argument("--optimizer", choices=["sgd", "adam"])
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="emaprune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write source/target CSVs and a manifest")
    sub.add_parser("train", parents=[common], help="pretrain on source, prune-finetune on target")
    sub.add_parser("sweep", parents=[common], help="scorer x ratio x beta x seed grid")
    sub.add_parser("verify", parents=[common], help="instrumented run plus theory checks")
    return p


def overrides_from(args) -> dict:
    over = {"train": {}, "sweep": {}}
    if args.seed is not None:
        over["train"]["seed"] = args.seed
        over["sweep"]["seeds"] = [args.seed]
        if args.command == "gen-data":
            over["data"] = {"generate": {"seed": args.seed}}
    if args.pruning_ratio is not None:
        over["train"]["pruning_ratio"] = args.pruning_ratio
        over["sweep"]["pruning_ratios"] = [args.pruning_ratio]
    if args.scorer is not None:
        over["train"]["scorer"] = args.scorer
        over["sweep"]["scorers"] = [args.scorer]
    if args.beta is not None:
        over["train"]["beta"] = args.beta
        over["sweep"]["betas"] = [args.beta]
    if args.mode is not None:
        over["train"]["selection_mode"] = args.mode
    if args.optimizer is not None:
        over["train"]["optimizer"] = args.optimizer
    if args.out is not None:
        over["out"] = args.out
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = E.resolve_config(args.config, overrides_from(args))
        if args.jobs < 1:
            raise PreconditionError("--jobs must be at least 1")
    except (PreconditionError, OSError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    out = cfg["out"]
    try:
        if args.command == "gen-data":
            manifest = E.cmd_gen_data(cfg, out)
            print(json.dumps(manifest["files"], sort_keys=True))
            return EXIT_OK
        if args.command == "train":
            final = E.cmd_train(cfg, out)
            print(json.dumps({k: final[k] for k in ("val_metric", "test_metric", "time_efficiency")}))
            return EXIT_OK
        if args.command == "sweep":
            summary = E.cmd_sweep(cfg, out, jobs=args.jobs)
            print(json.dumps(summary, sort_keys=True))
            return EXIT_RUN if summary["failed"] else EXIT_OK
        report = E.cmd_verify(cfg, out)
        for name, check in report["checks"].items():
            state = {True: "PASS", False: "FAIL", None: "SKIP"}[check["passed"]]
            print(f"{state:4s} {name}")
        if not report["passed"]:
            log.error("failed checks: %s", ", ".join(report["failed"]))
            return EXIT_VERIFY
        return EXIT_OK
    except (CSVFormatError, PreconditionError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (TrainingAbort, FloatingPointError) as exc:
        log.error("run failed: %s", exc)
        return EXIT_RUN
    except OSError as exc:
        log.error("I/O error: %s (%s)", exc, getattr(exc, "filename", ""))
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
