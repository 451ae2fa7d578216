"""Command-line entry point: ``ultr-lab <stage> --config exp.toml``.

Exit codes: 0 success, 2 invalid input or configuration, 3 training or
runtime failure, 4 file-system errors (including refusing to overwrite).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, pipeline
from .config import ARMS, ExperimentConfig, config_from_dict, load_config
from .errors import TrainingError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4
STAGES = ("simulate", "estimate-policy", "train", "evaluate", "report", "run")

log = logging.getLogger("ultr_lab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ultr-lab", description="Unbiased learning-to-rank experiments on simulated clicks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment TOML file (defaults apply when omitted)")
        s.add_argument("--out", help="run directory (default: newest run under output_dir; simulate creates one)")
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--overwrite", action="store_true", help="replace existing stage outputs")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--arm", choices=ARMS, metavar="ARM",
                           help=f"train one arm ({', '.join(ARMS)}); default: every configured arm")
    return p


def resolve_run_dir(cfg: ExperimentConfig, out, creates: bool) -> Path:
    if out:
        return Path(out)
    root = Path(cfg.output_dir)
    if creates:
        return root / time.strftime("run-%Y%m%d-%H%M%S")
    runs = sorted(root.glob("run-*")) if root.is_dir() else []
    if not runs:
        raise ValidationError(f"no run directory under {root}; run 'simulate' first or pass --out")
    return runs[-1]


def _thread_limit():
    n = os.environ.get("ULTR_LAB_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    try:
        return threadpool_limits(limits=int(n))
    except ValueError:
        raise ValidationError(f"ULTR_LAB_THREADS must be an integer, got {n!r}") from None


def execute(args) -> None:
    cfg = load_config(args.config, args.seed) if args.config else config_from_dict({}, args.seed)
    creates = args.command in ("simulate", "run")
    run = pipeline.Run(cfg, resolve_run_dir(cfg, args.out, creates), args.overwrite)
    run.dir.mkdir(parents=True, exist_ok=True)
    log.info("run directory %s", run.dir)
    with _thread_limit():
        if args.command == "simulate":
            pipeline.cmd_simulate(run)
        elif args.command == "estimate-policy":
            pipeline.cmd_estimate_policy(run)
        elif args.command == "train":
            for arm in [args.arm] if args.arm else cfg.arms:
                log.info("training %s", arm)
                pipeline.cmd_train(run, arm)
        elif args.command == "evaluate":
            pipeline.cmd_evaluate(run)
        elif args.command == "report":
            sys.stdout.write(pipeline.cmd_report(run))
        else:
            sys.stdout.write(pipeline.run_all(run))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        execute(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, FloatingPointError, ArithmeticError) as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
