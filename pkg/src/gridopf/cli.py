"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .chance_constraints import compute_alpha
from .exceptions import ConfigError, GridOpfError
from .sim_harness import (compare_cases, emit_outputs, load_inputs,
                          run_scenario, summarize, verify_scenario)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _add_common(parser, with_case=True):
    parser.add_argument("--grid", help="grid JSON file (overrides scenario ref)")
    parser.add_argument("--scenario", required=True, help="scenario JSON file")
    parser.add_argument("--beta", type=float, help="override probability threshold")
    parser.add_argument("--seed", type=int, help="override scenario seed")
    parser.add_argument("--horizon", type=int, help="override number of steps")
    if with_case:
        parser.add_argument("--case", choices=("with-cov", "no-cov"),
                            help="override case mode")


def _overrides(args):
    out = {}
    for key in ("beta", "seed", "horizon", "case"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _scenario(args):
    return load_inputs(args.scenario, grid_path=args.grid,
                       overrides=_overrides(args))


def _cmd_run(args) -> int:
    scenario = _scenario(args)
    records = run_scenario(scenario, dump_dir=args.dump_program)
    emit_outputs(records, args.out, scenario)
    summary = summarize(records, scenario)
    print(json.dumps(summary, indent=2))
    hard_failures = sum(cnt for status, cnt in summary["statuses"].items()
                        if status.startswith("failed"))
    return EXIT_SOLVER if hard_failures else EXIT_OK


def _cmd_compare(args) -> int:
    scenario = _scenario(args)
    report = compare_cases(scenario)
    if args.out:
        import os
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "comparison.json"), "w") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    print(json.dumps(report["comparison"], indent=2))
    failures = sum(
        sum(cnt for status, cnt in report[case]["statuses"].items()
            if status.startswith("failed"))
        for case in ("with-cov", "no-cov"))
    return EXIT_SOLVER if failures else EXIT_OK


def _cmd_alpha(args) -> int:
    print(f"{compute_alpha(args.beta):.6f}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    scenario = _scenario(args)
    rows, thresh = verify_scenario(scenario, args.samples)
    worst = min((p for _, p in rows), default=float("nan"))
    for t, p in rows:
        print(f"t={t:3d} min band probability {p:.5f}")
    print(f"threshold {thresh:.5f}, worst {worst:.5f}")
    if not rows:
        print("no optimal steps to verify", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK if worst >= thresh else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridopf",
        description="Chance-constrained re-dispatch for 3-phase feeders")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one closed-loop scenario")
    _add_common(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--dump-program", metavar="DIR", default=None,
                       help="dump per-step program/solution JSON for diffing")
    p_run.set_defaults(fn=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run both case modes and compare")
    _add_common(p_cmp, with_case=False)
    p_cmp.add_argument("--out", help="output directory for comparison.json")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_alpha = sub.add_parser("alpha", help="print the tightening multiplier")
    p_alpha.add_argument("--beta", type=float, required=True)
    p_alpha.set_defaults(fn=_cmd_alpha)

    p_ver = sub.add_parser("verify", help="sampled validation of the band guarantee")
    _add_common(p_ver, with_case=False)
    p_ver.add_argument("--samples", type=int, default=10000)
    p_ver.set_defaults(fn=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GridOpfError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return code


if __name__ == "__main__":
    sys.exit(main())
