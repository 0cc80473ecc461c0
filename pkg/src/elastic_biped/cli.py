"""Command line: ``elastic-biped run|list|describe``."""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .harness import OUT_ENV, RunReport, ScenarioError, describe, get_scenario, list_scenarios, run_scenario


def _scenario_from_args(name, args):
    sc = get_scenario(name)
    changes = {}
    if args.model is not None:
        changes["model"] = args.model
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.oracle_state:
        changes["oracle_state"] = True
    if args.estimated_state:
        changes["oracle_state"] = False
    if args.rigid_limit:
        changes["rigid_limit"] = True
    if args.kf == "off":
        changes["kf"] = False
    if args.assist is not None:
        changes["assist_damping"] = args.assist
    return replace(sc, **changes)


def _print_report(r: RunReport):
    status = "PASS" if r.passed else "FAIL"
    print(f"{r.scenario}: {status} ({r.runtime:.1f} s)")
    if r.flags.get("oracle_state"):
        print("  note: ground-truth state fed to the controller (oracle-state)")
    if r.flags.get("assist_damping"):
        print(f"  note: scripted pelvis assist damping {r.flags['assist_damping']:g} N s/m in use")
    for v in r.verdicts:
        print(f"  criterion {v.criterion}: {'pass' if v.passed else 'FAIL'}  {v.measured}")
    for h in r.halts:
        print(f"  halt: {' '.join(h)}")
    if r.error:
        print(f"  error: {r.error}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="elastic-biped", description="Run elastic biped scenarios.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="run one or more scenarios ('all' for every shipped one)")
    run.add_argument("scenarios", nargs="+")
    run.add_argument("--model", help="shipped model name or path to a model TOML file")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    state = run.add_mutually_exclusive_group()
    state.add_argument("--oracle-state", action="store_true", help="feed ground-truth state to the controller")
    state.add_argument("--estimated-state", action="store_true", help="force the estimator in the loop")
    run.add_argument("--rigid-limit", action="store_true", help="rigid links: no deflection, link-side encoders")
    run.add_argument("--kf", choices=("on", "off"), default="on")
    run.add_argument("--assist", type=float, help="scripted pelvis damping, N s/m (flagged in the report)")
    run.add_argument("--jobs", type=int, default=1, help="scenarios run in parallel processes")
    sub.add_parser("list", help="list shipped scenarios")
    desc = sub.add_parser("describe", help="describe a scenario")
    desc.add_argument("scenario")
    args = ap.parse_args(argv)

    try:
        if args.cmd == "list":
            for name in list_scenarios():
                print(f"{name:22s} criteria {', '.join(map(str, get_scenario(name).criteria))}")
            return 0
        if args.cmd == "describe":
            print(describe(args.scenario))
            return 0
        names = list_scenarios() if args.scenarios == ["all"] else args.scenarios
        scenarios = [_scenario_from_args(n, args) for n in names]
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.jobs > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(run_scenario, scenarios))
    else:
        reports = [run_scenario(sc) for sc in scenarios]
    for r in reports:
        _print_report(r)
    return 0 if all(r.passed for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
