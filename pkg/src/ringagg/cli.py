"""Command line: ``ringagg {run,sweep,partition-mc,lowerbound,dump-overlay}``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from typing import Sequence

from .experiments import (
    CSV_COLUMNS,
    LowerBoundConfig,
    RunConfig,
    build_view,
    lowerbound_demo,
    montecarlo_partition,
    run_once,
    sweep_scaling,
    within_sigma,
)
from .overlay import OverlayError
from .simnet import ConfigError

EXIT_ABORT = 2
EXIT_MISMATCH = 3
EXIT_CONFIG = 4

DEFAULT_TRIALS = {"partition-mc": 1000, "lowerbound": 500}


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend is not None:
        overrides["backend"] = args.backend
    return cfg.replace(**overrides) if overrides else cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    outcome = run_once(cfg, trace=args.trace)
    _emit(_csv([outcome.row], CSV_COLUMNS), args.out)
    if args.trace:
        sys.stdout.write(outcome.trace + ("\n" if outcome.trace else ""))
    if args.dump_overlay:
        sys.stdout.write(outcome.overlay_dump + "\n")
    if outcome.aborted:
        where = "hop" if outcome.aborted == "ring" else "cluster"
        detail = f" at {where} {outcome.abort_detail}" if outcome.abort_detail is not None else ""
        print(f"epoch aborted in phase {outcome.aborted}{detail}", file=sys.stderr)
        return EXIT_ABORT
    if not outcome.row["result_ok"]:
        print("decrypted total disagrees with the plaintext oracle", file=sys.stderr)
        return EXIT_MISMATCH
    return 0


def cmd_sweep(args) -> int:
    template = _config(args)
    ns = [int(v) for v in args.ns.split(",")]
    rows = []
    for k in range(args.trials):
        rows.extend(sweep_scaling(ns, template.replace(seed=template.seed + k)))
    _emit(_csv(rows, CSV_COLUMNS), args.out)
    return 0


def cmd_partition(args) -> int:
    res = montecarlo_partition(args.n, args.tau, args.s, args.trials, args.seed or 0)
    row = {
        "n": res.n,
        "tau": res.tau_frac,
        "s": res.s,
        "trials": res.trials,
        "frequency": res.frequency,
        "union_bound": round(res.union_bound, 6),
        "sigma": round(res.sigma, 6),
        "within_3sigma": within_sigma(res.frequency, res.union_bound, res.sigma, res.trials),
    }
    _emit(_csv([row], list(row)), args.out)
    return 0


def cmd_lowerbound(args) -> int:
    cfg = LowerBoundConfig(args.n, args.epsilon, args.omega_plus, args.omega_minus, args.c_frac, args.trials)
    res = lowerbound_demo(cfg, args.seed or 0)
    row = {
        "n": cfg.n,
        "epsilon": cfg.epsilon,
        "omega_plus": cfg.omega_plus,
        "trials": cfg.trials,
        "frequency": res.frequency,
        "mean_disjoint": round(res.mean_disjoint, 3),
        "closed_form": round(res.closed_form, 6),
        "within_3sigma": within_sigma(res.frequency, res.closed_form, res.sigma, cfg.trials),
    }
    _emit(_csv([row], list(row)), args.out)
    return 0


def cmd_dump_overlay(args) -> int:
    _emit(build_view(_config(args)).dump() + "\n", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    # per-command defaults live in DEFAULT_TRIALS; parent actions are shared between subparsers
    common.add_argument("--trials", type=int)
    common.add_argument("--out", help="write CSV here instead of stdout")
    common.add_argument("--backend", choices=("mock", "real"))
    common.add_argument("--trace", action="store_true", help="print one line per delivered envelope")

    parser = argparse.ArgumentParser(prog="ringagg", description="Cluster-ring secure aggregation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="one aggregation epoch")
    run.add_argument("--dump-overlay", action="store_true")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", parents=[common], help="scaling sweep over n")
    sweep.add_argument("--ns", default="64,128,256")
    sweep.set_defaults(func=cmd_sweep)

    part = sub.add_parser("partition-mc", parents=[common], help="static partition Monte Carlo")
    part.add_argument("--n", type=int, default=1024)
    part.add_argument("--tau", type=float, default=0.3)
    part.add_argument("--s", type=int, default=40)
    part.set_defaults(func=cmd_partition)

    low = sub.add_parser("lowerbound", parents=[common], help="interception experiment")
    low.add_argument("--n", type=int, default=10000)
    low.add_argument("--epsilon", type=float, default=0.3)
    low.add_argument("--omega-plus", type=int, default=2)
    low.add_argument("--omega-minus", type=int)
    low.add_argument("--c-frac", type=float, default=1.0)
    low.set_defaults(func=cmd_lowerbound)

    dump = sub.add_parser("dump-overlay", parents=[common], help="print the cluster layout")
    dump.set_defaults(func=cmd_dump_overlay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.trials is None:
        args.trials = DEFAULT_TRIALS.get(args.command, 1)
    try:
        return args.func(args)
    except (ConfigError, OverlayError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
