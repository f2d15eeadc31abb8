"""Command-line entry point: ``microdeploy <command> ...``.

Exit codes: 0 success, 1 infeasible request or strong dependency cycle,
2 invalid input, 3 solver timeout (the best configuration found is still
written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import formats
from .formats import FormatError
from .model import ModelError, check_correct, validate_universe
from .pipeline import BASE_THROUGHPUT, builtin_email_pipeline, builtin_scale_plans
from .plan import PlanError, PlanErrorKind, synthesize_plan, validate_plan
from .sim import ConfigInvalid, SimConfig, SimulationTrace, compare, default_workload, run
from .synthesis import Status, TargetRequest, ThroughputTarget, UnprovidablePort, synthesize

EXIT_OK, EXIT_INFEASIBLE, EXIT_INVALID, EXIT_TIMEOUT = 0, 1, 2, 3


class InputError(Exception):
    pass


def _err(msg):
    print(msg, file=sys.stderr)


def _write(out, text):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _read(path, parser):
    try:
        text = formats.read_text(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    return parser(text, path)


def _universe(args):
    if args.universe:
        return _read(args.universe, formats.parse_universe)
    return builtin_email_pipeline()[0]


def _scenario(args):
    """Universe, pipeline, initial configuration, scale plans, workload, sim config."""
    if args.scenario:
        text = _read(args.scenario, lambda t, p: t)
        sc = formats.parse_scenario(text, args.scenario, os.path.dirname(os.path.abspath(args.scenario)))
    else:
        sc = dict(zip(("universe", "pipeline", "initial"), builtin_email_pipeline()),
                  scale_plans=None, workload=None, sim=None)
    if sc["scale_plans"] is None:
        sc["scale_plans"] = builtin_scale_plans(sc["universe"], sc["pipeline"], sc["initial"])
    sc["workload"] = sc["workload"] or default_workload()
    sim = sc["sim"] or SimConfig()
    fields = {f: getattr(sim, f) for f in SimConfig.__dataclass_fields__}
    if args.seed is not None:
        fields["seed"] = args.seed
    if args.duration is not None:
        fields["duration"] = args.duration
    sc["sim"] = SimConfig(**fields)
    return sc


# -- commands ------------------------------------------------------------------

def cmd_synth(args):
    universe = _universe(args)
    if args.request:
        request = _read(args.request, formats.parse_request)
    else:
        request = TargetRequest({}, ThroughputTarget(BASE_THROUGHPUT, builtin_email_pipeline()[1]))
    existing = _read(args.source, formats.parse_configuration) if args.source else None
    report = validate_universe(universe)
    if not report.ok:
        raise InputError("; ".join(i.message for i in report.errors))
    try:
        sol = synthesize(universe, request, existing=existing, time_budget=args.time_budget)
    except UnprovidablePort as exc:
        _err(f"infeasible: {exc}")
        return EXIT_INFEASIBLE
    if sol.configuration is None:
        _err("infeasible" if sol.status is Status.INFEASIBLE else "timeout: no configuration found")
        return EXIT_INFEASIBLE if sol.status is Status.INFEASIBLE else EXIT_TIMEOUT
    _write(args.out, formats.dump(sol.configuration.to_dict()))
    _err(f"{sol.status.value}: cost {sol.objective_cost:g}, {sol.instance_count} instances, "
         f"{len(sol.configuration.nodes)} nodes")
    return EXIT_TIMEOUT if sol.timed_out else EXIT_OK


def cmd_plan(args):
    if not args.source or not args.target:
        raise InputError("plan needs --source and --target")
    universe = _universe(args)
    source = _read(args.source, formats.parse_configuration)
    target = _read(args.target, formats.parse_configuration)
    try:
        plan = synthesize_plan(source, target, universe)
    except PlanError as exc:
        if exc.kind in (PlanErrorKind.ENDPOINT_INCORRECT, PlanErrorKind.IDENTIFIER_REUSE):
            raise InputError(str(exc)) from None
        _err(str(exc))
        return EXIT_INFEASIBLE
    _write(args.out, formats.dump(formats.plan_to_dict(plan)))
    _err(f"{len(plan.actions)} actions")
    return EXIT_OK


def _simulate(sc, controller):
    return run(sc["universe"], sc["pipeline"], sc["initial"], sc["workload"],
               controller, sc["sim"], sc["scale_plans"])


def _summary(trace):
    t = trace.totals
    return (f"{trace.controller}: lost {t['lost']}, completed {t['completed']}, "
            f"cost {trace.cum_cost[-1]:g}, peak components {max(trace.components)}")


def cmd_simulate(args):
    sc = _scenario(args)
    trace = _simulate(sc, args.controller)
    _write(args.out, trace.to_csv())
    _err(_summary(trace))
    return EXIT_OK


def _arm(payload):
    sc, controller = payload
    return _simulate(sc, controller)


def cmd_compare(args):
    if args.run_both:
        sc = _scenario(args)
        with ThreadPoolExecutor(max_workers=2) as pool:
            local, glob = pool.map(_arm, [(sc, "local"), (sc, "global")])
        if args.out:
            stem = os.path.splitext(args.out)[0]
            local.write_csv(stem + "-local.csv")
            glob.write_csv(stem + "-global.csv")
    else:
        if len(args.traces) != 2:
            raise InputError("compare needs two trace files (local, global) or --run-both")
        loaded = []
        for path in args.traces:
            try:
                loaded.append(SimulationTrace.from_csv(formats.read_text(path)))
            except (OSError, ValueError) as exc:
                raise InputError(f"{path}: {exc}") from None
        local, glob = loaded
    report = compare(local, glob)
    print(report.table())
    if args.out:
        _write(args.out, formats.dump(report.to_dict()))
    return EXIT_OK


def cmd_emit(args):
    out = args.out or "builtin"
    os.makedirs(out, exist_ok=True)
    universe, spec, base = builtin_email_pipeline()
    plans = builtin_scale_plans(universe, spec, base)
    files = {
        "universe.json": formats.universe_to_dict(universe),
        "pipeline.json": spec.to_dict(),
        "base.json": base.to_dict(),
        "scale_plans.json": formats.scale_plans_to_dict(plans),
        "workload.json": formats.workload_to_dict(default_workload()),
        "request.json": formats.request_to_dict(TargetRequest({}, ThroughputTarget(BASE_THROUGHPUT, spec))),
        "scenario.json": {"universe": "universe.json", "pipeline": "pipeline.json", "initial": "base.json",
                          "scale_plans": "scale_plans.json", "workload": "workload.json"},
    }
    for name, data in files.items():
        _write(os.path.join(out, name), formats.dump(data))
    _err(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_validate(args):
    path = args.file
    try:
        text = formats.read_text(path)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    if path.endswith(".csv"):
        try:
            trace = SimulationTrace.from_csv(text)
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from None
        print(f"{path}: trace with {len(trace)} ticks")
        return EXIT_OK
    try:
        kind = formats.detect_kind(json.loads(text))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
    if kind is None:
        raise InputError(f"{path}: cannot tell what kind of document this is")
    problems = []
    if kind == "universe":
        report = validate_universe(formats.parse_universe(text, path))
        problems = [i.message for i in report.errors]
        for w in report.warnings:
            print(f"warning: {w.message}")
    elif kind == "configuration":
        config = formats.parse_configuration(text, path)
        report = check_correct(_universe(args), config)
        problems = [v.message for v in report.violations]
    elif kind == "plan":
        plan = formats.parse_plan(text, path)
        if args.source:
            source = _read(args.source, formats.parse_configuration)
            try:
                validate_plan(source, plan, _universe(args))
            except PlanError as exc:
                problems = [str(exc)]
    elif kind == "scenario":
        formats.parse_scenario(text, path, os.path.dirname(os.path.abspath(path)))
    elif kind == "pipeline":
        formats.parse_pipeline(text, path)
    elif kind == "request":
        formats.parse_request(text, path)
    elif kind == "scale_plans":
        universe = _universe(args)
        for sp in formats.parse_scale_plans(text, path):
            if sp.target is not None:
                problems += [f"{sp.name}: {v.message}" for v in check_correct(universe, sp.target).violations]
    elif kind == "workload":
        formats.parse_workload(text, path)
    for p in problems:
        print(f"{path}: {p}")
    print(f"{path}: {kind} {'ok' if not problems else 'INVALID'}")
    return EXIT_OK if not problems else EXIT_INVALID


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microdeploy", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def universe_flag(sp):
        sp.add_argument("--universe", help="universe JSON file (default: built-in email case study)")

    def out_flag(sp, what):
        sp.add_argument("--out", help=f"where to write {what} (default: stdout)")

    def sim_flags(sp):
        sp.add_argument("--scenario", help="scenario JSON file (default: built-in case study)")
        sp.add_argument("--seed", type=int, help="random seed (default: the scenario's, else 0)")
        sp.add_argument("--duration", type=int, help="simulated ticks (default: the scenario's, else 40000)")

    s = sub.add_parser("synth", help="synthesize an optimal configuration")
    universe_flag(s)
    s.add_argument("--request", help="request JSON file (default: built-in base throughput, 10000 msg/s)")
    s.add_argument("--source", help="existing configuration to extend (optional)")
    s.add_argument("--time-budget", type=float, default=60.0, help="solver time budget in seconds (default: 60)")
    out_flag(s, "the configuration JSON")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("plan", help="build a deployment plan between two configurations")
    universe_flag(s)
    s.add_argument("--source", help="source configuration JSON file")
    s.add_argument("--target", help="target configuration JSON file")
    out_flag(s, "the plan JSON")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="simulate a scenario and write a CSV trace")
    sim_flags(s)
    s.add_argument("--controller", choices=("local", "global", "none"), default="global",
                   help="adaptation controller (default: global)")
    out_flag(s, "the trace CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", help="compare a local and a global trace")
    s.add_argument("traces", nargs="*", help="local trace CSV then global trace CSV")
    s.add_argument("--run-both", action="store_true",
                   help="simulate both arms (concurrently) instead of reading traces")
    sim_flags(s)
    s.add_argument("--out", help="report JSON path; with --run-both the traces go next to it")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("scenario", help="scenario utilities")
    ssub = s.add_subparsers(dest="scenario_command", required=True)
    e = ssub.add_parser("emit-builtin", help="write the built-in case study as editable files")
    e.add_argument("--out", help="output directory (default: ./builtin)")
    e.set_defaults(func=cmd_emit)

    s = sub.add_parser("validate", help="check any input file and report problems")
    s.add_argument("file", help="universe, configuration, request, plan, pipeline, scenario JSON or trace CSV")
    universe_flag(s)
    s.add_argument("--source", help="for plans: replay from this configuration")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, InputError, ModelError, ConfigInvalid) as exc:
        _err(f"error: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
