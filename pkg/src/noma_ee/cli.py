"""Command line front-end: ``noma-ee run|sweep|summarize``."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .experiment import (
    WORKERS_ENV,
    SchemeSpec,
    format_table,
    load_config,
    parse_spec,
    run_experiment,
    summarize_dir,
)


def _apply_overrides(spec, args):
    train = spec.train
    if args.episodes is not None:
        train = dataclasses.replace(train, episodes=args.episodes)
    if args.timeslots is not None:
        train = dataclasses.replace(train, timeslots=args.timeslots)
    if args.levels is not None:
        train = dataclasses.replace(train, levels=args.levels)
    spec.train = train
    if args.seed is not None:
        spec.seed = args.seed
    if args.scheme:
        spec.schemes = [SchemeSpec.parse(s) for s in args.scheme.split(",") if s.strip()]
        if args.levels is not None:
            for s in spec.schemes:
                s.levels = s.levels or args.levels
    if args.out is not None:
        spec.out = args.out
    if args.replications is not None:
        spec.replications = args.replications
    return spec


def _add_run_flags(p):
    p.add_argument("spec", help="spec file (flat 'section.key = value' lines); '-' for defaults")
    p.add_argument("--seed", type=int, help="base seed (replication r uses seed + r)")
    p.add_argument("--scheme", help="comma list, e.g. 'homad,fullmad:4,fullmaql:2'")
    p.add_argument("--out", help="output directory")
    p.add_argument("--episodes", type=int, help="episodes per run (E_p)")
    p.add_argument("--timeslots", type=int, help="TSs per episode (T)")
    p.add_argument("--levels", type=int, help="power levels L for Full-MAD / Full-MAQL")
    p.add_argument("--replications", type=int, help="number of seeds per cell")
    p.add_argument("--workers", type=int, help=f"parallel runs (default: ${WORKERS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noma-ee", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="train every scheme on one scenario"))
    _add_run_flags(sub.add_parser("sweep", help="train over the spec's sweep axis"))
    p = sub.add_parser("summarize", help="convergence table for a results directory")
    p.add_argument("dir")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--sweep-value", help="restrict to one sweep value")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "summarize":
        table = summarize_dir(args.dir, args.window, args.tol, args.sweep_value)
        print(format_table(table))
        return 0
    try:
        spec = parse_spec("") if args.spec == "-" else load_config(args.spec)
        spec = _apply_overrides(spec, args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run" and spec.sweep_axis != "none":
        spec.sweep_axis, spec.sweep_values = "none", []
    if args.command == "sweep" and spec.sweep_axis == "none":
        print("error: sweep.axis is not set in the spec", file=sys.stderr)
        return 2
    rows, _ = run_experiment(spec, workers=args.workers)
    for r in rows:
        conv = "-" if r.convergence_episode is None else r.convergence_episode
        extra = f"  error: {r.error}" if r.error else ""
        print(f"{r.scheme:<12} {r.sweep_value:>6} seed={r.seed:<3} EE={r.avg_ee:.4e} bits/J "
              f"conv={conv} viol={r.violation_rate:.3f}{extra}")
    print(f"results written to {spec.out}/results.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
