"""Probability-certificate safety filters: estimation, closed-loop comparisons and learning runs.

Exit status is 0 when every applicable acceptance threshold holds, 1 when
any fails and 2 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ProbCertError
from .experiments import (
    CONTROLLERS,
    build_field,
    build_id,
    check_rl,
    check_runs,
    emit_outputs,
    run_closed_loop,
    run_rl,
)
from .field import SafeProbField
from .scenario import load_scenario

log = logging.getLogger("probcert")


def _field_for(scenario, args):
    if args.field:
        return SafeProbField.load(args.field)
    log.info("tabulating field for %s", scenario.name)
    field = build_field(scenario, jobs=args.jobs)
    path = Path(args.out) / f"{scenario.name}.field"
    path.parent.mkdir(parents=True, exist_ok=True)
    field.save(path)
    return field


def _report(checks) -> int:
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  ({c.detail})")
    return 0 if all(c.passed for c in checks) else 1


def cmd_estimate(args) -> int:
    scenario = load_scenario(args.scenario)
    field = build_field(scenario, samples=args.samples, jobs=args.jobs, seed=args.seed)
    out = Path(args.out)
    path = out if out.suffix else out / f"{scenario.name}.field"
    path.parent.mkdir(parents=True, exist_ok=True)
    field.save(path)
    print(f"wrote {path} ({field.values.size} nodes, {field.clamped_nodes} clamped)")
    return 0


def _closed_loop(args, mode) -> int:
    scenario = load_scenario(args.scenario)
    field = _field_for(scenario, args)
    names = CONTROLLERS + ("nominal",) if args.controller == "all" else (args.controller,)
    seed = scenario.run.seed if args.seed is None else args.seed
    results = [run_closed_loop(scenario, c, mode, seed=seed, field=field) for c in names]
    for path in emit_outputs(results, args.out, seed, plots=args.plots):
        print(f"wrote {path}")
    return _report(check_runs(results))


def cmd_worst_case(args) -> int:
    return _closed_loop(args, "worst-case")


def cmd_switching(args) -> int:
    return _closed_loop(args, "switching")


def _learning(args, kind) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.run.seed if args.seed is None else args.seed
    runs = [run_rl(scenario, kind, filtered, seed) for filtered in (False, True)]
    for path in emit_outputs([], args.out, seed, rl_runs=runs):
        print(f"wrote {path}")
    return _report(check_rl(runs))


def cmd_rl_pg(args) -> int:
    return _learning(args, "pg")


def cmd_rl_q(args) -> int:
    return _learning(args, "qlearn")


def cmd_report(args) -> int:
    """Run every built-in comparison and learning experiment and write the summary."""
    results, runs = [], []
    plan = {"system1": ("worst-case", "switching"), "system2": ("worst-case", "switching"), "nn": ("switching",)}
    for name, modes in plan.items():
        scenario = load_scenario(name)
        seed = scenario.run.seed if args.seed is None else args.seed
        field = build_field(scenario, jobs=args.jobs)
        names = ("nominal", "proposed") if name == "nn" else CONTROLLERS
        for mode in modes:
            results.extend(run_closed_loop(scenario, c, mode, seed=seed, field=field) for c in names)
    chain = load_scenario("chain")
    seed = chain.run.seed if args.seed is None else args.seed
    for kind in ("pg", "qlearn"):
        runs.extend(run_rl(chain, kind, filtered, seed) for filtered in (False, True))
    for path in emit_outputs(results, args.out, 0 if args.seed is None else args.seed, rl_runs=runs,
                             plots=args.plots):
        print(f"wrote {path}")
    return _report(check_runs(results) + check_rl(runs))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probcert", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="built-in name or path to a scenario file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (defaults to the scenario's)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="threads for field tabulation")
        return sp

    sp = common(sub.add_parser("estimate", help="tabulate a safe-probability field"))
    sp.add_argument("--samples", type=int, default=None, help="samples per node")
    sp.set_defaults(func=cmd_estimate)
    for name, fn in (("worst-case", cmd_worst_case), ("switching", cmd_switching)):
        sp = common(sub.add_parser(name, help=f"{name} closed-loop comparison"))
        sp.add_argument("--controller", default="all", choices=CONTROLLERS + ("nominal", "all"))
        sp.add_argument("--field", default=None, help="previously tabulated field file")
        sp.add_argument("--plots", action="store_true")
        sp.set_defaults(func=fn)
    for name, fn in (("rl-pg", cmd_rl_pg), ("rl-q", cmd_rl_q)):
        sp = common(sub.add_parser(name, help="learning run with and without the filter"), scenario=False)
        sp.add_argument("--scenario", default="chain", help="built-in name or path to a scenario file")
        sp.set_defaults(func=fn)
    sp = common(sub.add_parser("report", help="run all experiments and summarize"), scenario=False)
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("build %s", build_id())
    try:
        return args.func(args)
    except (ProbCertError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
