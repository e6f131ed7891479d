"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical instability.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

from .autodiff import ContractViolation
from .harness import RunConfig, load_run_config, run_eval, run_sweep, run_train
from .harness import flops_ebt_per_token, flops_ff_per_token, nonembed_count
from .model import InstabilityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNSTABLE = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="override run seed")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--precision", type=int, choices=(32, 64),
                   help="float width for all computation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minergy",
        description="energy-descent sequence models: train, evaluate, sweep")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    _add_common(p)
    p.add_argument("--steps", type=int, help="override optimizer step count")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("checkpoint")
    _add_common(p)
    p.add_argument("--steps", type=int, help="descent steps per candidate")
    p.add_argument("--candidates", type=int, help="parallel candidate count")

    p = sub.add_parser("sweep", help="scaling sweep along one axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=("width", "depth", "data", "steps"))
    p.add_argument("--grid", required=True,
                   help="comma-separated axis values, at least 3")

    p = sub.add_parser("flops", help="print the compute model for a config")
    _add_common(p)
    p.add_argument("--steps", type=int, help="descent steps to price")

    p = sub.add_parser("trace-export", help="write a JSON energy trace")
    p.add_argument("checkpoint")
    _add_common(p)
    p.add_argument("--steps", type=int, help="descent steps per candidate")
    p.add_argument("--candidates", type=int, help="parallel candidate count")

    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig().validate()
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.out is not None:
        run = replace(run, out_dir=args.out)
    if args.precision is not None:
        run = replace(run, precision=args.precision)
    return replace(cfg, run=run)


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, total_steps=args.steps))
    record = run_train(cfg)
    print(json.dumps({k: record[k] for k in
                      ("final_loss", "val_loss", "checkpoint", "steps",
                       "nfe_cum", "flops_cum")}, indent=1))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    report = run_eval(args.checkpoint, cfg, n_steps=args.steps,
                      candidates=args.candidates)
    print(json.dumps(report, indent=1))
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    try:
        grid = [int(v) for v in args.grid.split(",") if v]
    except ValueError as err:
        raise ContractViolation(f"bad --grid: {err}") from err
    report = run_sweep(args.axis, grid, cfg)
    print(json.dumps(report, indent=1))
    return EXIT_OK


def _cmd_flops(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    steps = args.steps if args.steps is not None else cfg.model.num_steps
    n = nonembed_count(cfg.model)
    report = flops_ebt_per_token(n, steps)
    print(json.dumps({
        "nonembed_params": n,
        "ff_per_token": flops_ff_per_token(n),
        "per_step_flops": report.per_step_flops,
        "per_token_flops": report.per_token_flops,
        "ratio_vs_ff": str(report.ratio_vs_ff),
    }, indent=1))
    return EXIT_OK


def _cmd_trace(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = args.out if args.out is not None else cfg.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "trace.json")
    report = run_eval(args.checkpoint, cfg, n_steps=args.steps,
                      candidates=args.candidates, trace_path=trace_path)
    print(json.dumps({"trace": report["trace"], "nfe": report["nfe"]}, indent=1))
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "flops": _cmd_flops,
    "trace-export": _cmd_trace,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ContractViolation as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except InstabilityError as err:
        print(f"instability: {err}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
