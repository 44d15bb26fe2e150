"""Command line interface.

ljwflow list
    Print the scenario catalog as JSON.

ljwflow run --scenario ID --check NAME [options]
    Run one check, print (or write) its JSON report, and exit 0 when
    the check passed, 1 when it failed, 2 on usage errors or unknown
    names.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import LjwError, NotFoundError, UsageError
from .report import RunConfig, render_report, run_check
from .scenarios import list_scenarios
from .version import __version__


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ljwflow",
        description="Simulate degenerate manifold diffusions and verify "
                    "the derivative and filtering identities of the "
                    "induced geometry by paired Monte Carlo.")
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command")
    sub.add_parser("list", help="print the scenario catalog")
    rp = sub.add_parser("run", help="run one check and print its report")
    rp.add_argument("--scenario", required=True,
                    help="scenario id, see `ljwflow list`")
    rp.add_argument("--check", required=True,
                    help="check name (eq4, eq5, eq9, girsanov, "
                         "tau-derivative, conditional, geometry-ricci, "
                         "geometry-connection, compose)")
    rp.add_argument("--paths", type=int, default=100_000,
                    help="Monte Carlo sample count (default 100000)")
    rp.add_argument("--steps", type=int, default=None,
                    help="time steps per unit horizon (default 1024; "
                         "compose uses 64 and also runs the doubled grid)")
    rp.add_argument("--horizon", type=float, default=1.0,
                    help="final time T (default 1.0)")
    rp.add_argument("--seed", type=int, default=0,
                    help="master seed of the noise streams (default 0)")
    rp.add_argument("--tau", type=float, default=None,
                    help="shift size (girsanov, compose) or difference "
                         "step (tau-derivative); scenario default if "
                         "omitted")
    rp.add_argument("--workers", type=int, default=1,
                    help="process count for sampling checks (default 1); "
                         "results are identical for any value")
    rp.add_argument("--out", default=None,
                    help="write the JSON report to this file as well")
    rp.add_argument("--dump-samples", default=None,
                    help="write the per-sample arrays to this CSV file")
    rp.add_argument("--figures", default=None,
                    help="render PNG figures into this directory")
    return p


def entry(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            sys.stdout.write(json.dumps(list_scenarios(), sort_keys=True,
                                        indent=2) + "\n")
            return 0
        if args.command == "run":
            cfg = RunConfig(scenario=args.scenario, check=args.check,
                            paths=args.paths, steps=args.steps,
                            horizon=args.horizon, seed=args.seed,
                            tau=args.tau, workers=args.workers,
                            dump_samples=args.dump_samples,
                            figures=args.figures)
            report = run_check(cfg)
            text = render_report(report)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            sys.stdout.write(text)
            return 0 if report["pass"] else 1
        parser.print_help(sys.stderr)
        return 2
    except (UsageError, NotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except LjwError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
