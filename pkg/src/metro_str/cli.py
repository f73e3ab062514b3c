"""``metro-str`` command line.

Exit codes: 0 success, 1 invalid scenario or failed oracle check, 2 a
regulation horizon was infeasible (outputs are still written), 64 usage
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from metro_str.engine import FIXED, STR, RunOptions, compare_modes, run
from metro_str.model_core import ScenarioError
from metro_str.oracle import run_oracles
from metro_str.scenario_io import RunConfig, load_scenario, write_comparison, write_trace

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_USAGE = 0, 1, 2, 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", help="scenario file or bundled scenario name")
    p.add_argument("--out", dest="output_dir", default=None,
                   help="output directory (default: $STR_OUTPUT_DIR or ./str_output)")
    p.add_argument("--t0", type=float, default=0.0, help="first scheduled departure, seconds")
    p.add_argument("--format", dest="trace_format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--horizon-trains", type=int, default=2)
    p.add_argument("--pfm-tol", type=float, default=0.1)
    p.add_argument("--max-iter", type=int, default=RunOptions.max_iter)
    p.add_argument("--seed", type=int, default=None, help="reserved; runs are deterministic")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metro-str", description="Service-oriented metro traffic regulation simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="simulate one mode")
    _add_run_options(p)
    p.add_argument("--mode", choices=("str", "fixed"), default="str")

    p = sub.add_parser("compare", help="simulate both modes and report deltas")
    _add_run_options(p)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("scenario")

    p = sub.add_parser("oracle", help="cross-check the optimisers against brute force")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pfm-cases", type=int, default=50)
    p.add_argument("--tom-cases", type=int, default=10)
    return parser


def _config(args, mode: str) -> RunConfig:
    options = RunOptions(horizon_trains=args.horizon_trains, pfm_tol=args.pfm_tol, max_iter=args.max_iter)
    return RunConfig(args.scenario, mode, args.output_dir, args.t0, args.trace_format, options, args.seed)


def _print_summary(label: str, summary) -> None:
    keys = ("max_peak", "total_wait", "max_stranded", "pfm_episodes", "headway_changes",
            "infeasible_decisions", "final_J")
    print(f"{label}: " + ", ".join(f"{k}={summary[k]:.6g}" for k in keys))


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "oracle":
        rep = run_oracles(args.seed, args.pfm_cases, args.tom_cases)
        print(f"headway: {rep.pfm_cases} cases, max |dh|={rep.pfm_max_dh:.3g} s, max |dF|={rep.pfm_max_dF:.3g}")
        print(f"regulation: {rep.tom_cases} cases, max rel J gap={rep.tom_max_rel_gap:.3g}, "
              f"constraint violations={rep.tom_violations}")
        print("ok" if rep.ok else "MISMATCH")
        return EXIT_OK if rep.ok else EXIT_INVALID

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(f"{scenario.name}: ok ({scenario.n_trains} trains x {scenario.n_stations} stations)")
        return EXIT_OK

    try:
        if args.command == "run":
            config = _config(args, args.mode)
            trace = run(scenario, STR if args.mode == "str" else FIXED, args.t0, config.options)
            paths = write_trace(trace, config)
            _print_summary(trace.mode, trace.summary)
            infeasible = trace.infeasible_decisions
        else:
            config = _config(args, "compare")
            report = compare_modes(scenario, args.t0, config.options)
            paths = write_comparison(report, config)
            _print_summary(STR, report.str_trace.summary)
            _print_summary(FIXED, report.fixed_trace.summary)
            print("delta (STR - FIXED): " + ", ".join(f"{k}={v:.6g}" for k, v in report.deltas.items()))
            print(f"recovery event k: {report.recovery}")
            infeasible = report.str_trace.infeasible_decisions + report.fixed_trace.infeasible_decisions
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in paths:
        print(f"wrote {path}")
    if infeasible:
        print(f"warning: {infeasible} infeasible regulation decisions", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
