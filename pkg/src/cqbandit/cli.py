"""Command line entry point: ``cqbandit {run,sweep,psi-check,validate}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--T", type=int, help="horizon; rounds 1..T-1 are simulated")
    common.add_argument("--reps", type=int, help="replications per sweep point")
    common.add_argument("--policies", help="comma-separated policy names, e.g. CQB_EPS,CQB_OPT")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--assert-all", action="store_true",
                        help="enable every runtime assertion (non-zero exit on breach)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cqbandit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="replicated coupled runs at one configuration")
    sub.add_parser("sweep", parents=[common], help="cross product of the configured sweep axes")
    sub.add_parser("psi-check", parents=[common], help="sample psi(t,T) and check its range")
    sub.add_parser("validate", parents=[common], help="config lint plus instance feasibility dry run")
    return p


def _config(args) -> harness.ExperimentConfig:
    over = {"seed": args.seed, "T": args.T, "reps": args.reps, "out": args.out,
            "workers": args.workers}
    if args.policies:
        over["policies"] = args.policies.split(",")
    if args.assert_all:
        over.update(assert_elliptic=True, assert_bad_rounds=True, assert_psi=True)
    return harness.build_config(args.config, over)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (harness.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        try:
            for line in harness.validate(cfg):
                print(line)
        except harness.ConfigError as exc:
            print(f"infeasible: {exc}", file=sys.stderr)
            return 1
        return 0

    if args.command == "psi-check":
        rep = harness.psi_check(cfg)
        print(harness.format_histogram(rep.histogram))
        print(f"{len(rep.samples)} samples, {len(rep.violations)} violations, {rep.seconds:.1f}s")
        for v in rep.violations[:20]:
            print("  " + v, file=sys.stderr)
        return 0 if rep.ok() else 1

    try:
        if args.command == "run":
            res = harness.run_experiment(cfg)
        else:
            res = harness.run_sweep(cfg)
        if cfg.assert_psi:
            rep = harness.psi_check(cfg)
            if not rep.ok():
                print(f"psi check: {len(rep.violations)} violations", file=sys.stderr)
                return 1
    except harness.AssertionBreach as exc:
        print(f"assertion breach: {exc}", file=sys.stderr)
        return 1
    for key, path in res.files.items():
        print(f"{key}: {path}")
    for key, reason in res.skipped:
        print(f"skipped {key}: {reason}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
