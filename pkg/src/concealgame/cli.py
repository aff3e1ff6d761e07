"""Command-line entry point: ``concealgame <command> scenario.json ...``."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .env import ScenarioError, load_scenario, render
from .phase1.equilibrium import (DEVIATION_TOL, full_information_baseline, solve_phase1_sad,
                                 verify_equilibrium)
from .phase1.program import Phase1Problem, solve_phase1_lp
from .phase2 import build_value_tables
from .sim import comparison_report, monte_carlo_value, rollout
from .solvers import MultiStartConfig, SolverError

log = logging.getLogger("concealgame")

EXIT_OK, EXIT_INPUT, EXIT_VERIFY, EXIT_SOLVER = 0, 2, 3, 4


class InputError(Exception):
    pass


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d if suppress else None,
                        help="master random seed (default: scenario or 0)")
    parser.add_argument("--jobs", type=int, default=d if suppress else None,
                        help="worker processes for value tables")
    parser.add_argument("--out", type=Path, default=d if suppress else None,
                        help="output directory (default: ./out)")
    parser.add_argument("--tolerance", type=float, default=d if suppress else None,
                        help=f"deviation-gain tolerance for verification (default {DEVIATION_TOL})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="concealgame",
                                description="Representation-concealment defense games on grids.")
    _global_options(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_options(sp, suppress=True)
        sp.add_argument("scenario", type=Path)
        return sp

    cmd("validate", "check a scenario file and print its layout")
    s2 = cmd("solve-phase2", "build Phase-II value tables")
    s2.add_argument("--states", choices=["reachable", "all"], default="reachable")
    s2.add_argument("--restarts", type=int)

    s1 = cmd("solve-phase1", "solve and verify the Phase-I game")
    s1.add_argument("--values", type=Path, help="value bundle (default: OUT/values.json)")
    s1.add_argument("--build-tables", action="store_true", help="build value tables first")
    s1.add_argument("--restarts", type=int)
    s1.add_argument("--lp-only", action="store_true", help="report the relaxation value only")
    s1.add_argument("--verify-only", type=Path, metavar="EQUILIBRIUM",
                    help="re-verify an existing equilibrium document")
    s1.add_argument("--no-baseline", action="store_true")

    sm = cmd("simulate", "Monte-Carlo rollouts of an equilibrium")
    sm.add_argument("equilibrium", type=Path)
    sm.add_argument("--values", type=Path)
    sm.add_argument("-n", type=int, default=10000)
    sm.add_argument("--baseline", action="store_true", help="also compute the full-information baseline")
    sm.add_argument("--log-rollouts", type=int, default=100, metavar="K",
                    help="write the first K individual rollouts as JSON lines")

    vf = cmd("verify", "verify an equilibrium document")
    vf.add_argument("equilibrium", type=Path)
    vf.add_argument("--values", type=Path)
    return p


# --- helpers ---------------------------------------------------------------------

def _load(path: Path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    return load_scenario(text)


def _config(scenario, section: str, args, **extra) -> MultiStartConfig:
    solver = dict(scenario.solver)
    merged = {k: v for k, v in solver.items() if not isinstance(v, dict)}
    merged.update(solver.get(section, {}))
    return MultiStartConfig.from_mapping(merged, seed=args.seed, **extra)


def _values(args, scenario):
    path = args.values or args.out / "values.json"
    if not path.exists():
        raise InputError(f"value tables not found at {path}; run solve-phase2 or pass --build-tables")
    try:
        return io.read_value_tables(path, scenario), path
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"bad value bundle {path}: {exc}") from None


def _equilibrium(path: Path, scenario, values):
    try:
        doc = json.loads(Path(path).read_text())
        return io.equilibrium_from_dict(doc, scenario, values), doc
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"bad equilibrium document {path}: {exc}") from None


def _seed(args, scenario) -> int:
    return int(args.seed if args.seed is not None else scenario.solver.get("seed", 0))


def _manifest(args, argv, command, scenario, config, outputs, started):
    doc = io.run_manifest(command, args.scenario, _seed(args, scenario), config, outputs,
                          started, argv)
    return io.write_json(args.out / f"manifest_{command}.json", doc)


def _tables(scenario, args, all_states=False):
    cfg = _config(scenario, "phase2", args, restarts=getattr(args, "restarts_phase2", None))
    vt = build_value_tables(scenario, config=cfg, jobs=args.jobs, all_states=all_states)
    return vt, cfg


# --- commands --------------------------------------------------------------------

def cmd_validate(args, argv, started) -> int:
    scenario = _load(args.scenario)
    print(f"{scenario.name}: {scenario.grid.width}x{scenario.grid.height}, "
          f"{scenario.n_types} types, {scenario.n_barriers} barriers, T={scenario.horizon}, "
          f"beta={scenario.discount}")
    print(render(scenario))
    _manifest(args, argv, "validate", scenario, {}, [], started)
    return EXIT_OK


def cmd_phase2(args, argv, started) -> int:
    scenario = _load(args.scenario)
    args.restarts_phase2 = args.restarts
    vt, cfg = _tables(scenario, args, all_states=args.states == "all")
    paths = io.write_value_tables(vt, scenario, args.out)
    print(f"wrote {len(paths) - 1} CSV tables and values.json to {args.out}")
    _manifest(args, argv, "solve-phase2", scenario,
              {"phase2": cfg.__dict__, "states": args.states, "jobs": args.jobs}, paths, started)
    return EXIT_OK


def cmd_phase1(args, argv, started) -> int:
    scenario = _load(args.scenario)
    outputs = []
    if args.build_tables:
        vt, _ = _tables(scenario, args)
        outputs += io.write_value_tables(vt, scenario, args.out)
    else:
        vt, _ = _values(args, scenario)
    cfg = _config(scenario, "phase1", args, restarts=args.restarts)
    vcfg = _config(scenario, "verify", args, restarts=scenario.solver.get("verify", {}).get("restarts", 8))
    if args.verify_only:
        sol, _ = _equilibrium(args.verify_only, scenario, vt)
        report = verify_equilibrium(sol, vcfg, args.tolerance)
        print(json.dumps(report.to_dict(), indent=1))
        _manifest(args, argv, "verify", scenario, {"verify": vcfg.__dict__}, [], started)
        return EXIT_OK if report.passed else EXIT_VERIFY
    if args.lp_only:
        _, lp_value = solve_phase1_lp(Phase1Problem(scenario, vt))
        print(f"relaxation value {lp_value:.6f}")
        p = io.write_json(args.out / "phase1_lp.json", {"schema_version": io.SCHEMA_VERSION,
                                                         "kind": "phase1_lp", "value": lp_value})
        _manifest(args, argv, "solve-phase1", scenario, {"lp_only": True}, outputs + [p], started)
        return EXIT_OK
    baseline = None
    if not args.no_baseline:
        baseline = full_information_baseline(scenario, vt, cfg)
    seeds = [] if baseline is None else [Phase1Problem(scenario, vt).join(baseline.policies)]
    sol = solve_phase1_sad(scenario, vt, cfg, seeds=seeds)
    sol.baseline = baseline
    report = verify_equilibrium(sol, vcfg, args.tolerance)
    p = io.write_json(args.out / "equilibrium.json", io.equilibrium_to_dict(sol))
    outputs.append(p)
    print(f"equilibrium value {sol.value:.6f}   relaxation {sol.lp_value:.6f}")
    if baseline is not None:
        print(f"full-information baseline {baseline.value:.6f}")
    print(f"verification {'passed' if report.passed else 'FAILED'}; deviation gains "
          + ", ".join(f"{g:.2e}" for g in report.deviation_gains))
    _manifest(args, argv, "solve-phase1", scenario,
              {"phase1": cfg.__dict__, "verify": vcfg.__dict__, "tolerance": args.tolerance},
              outputs, started)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_simulate(args, argv, started) -> int:
    if args.n < 1:
        raise InputError("n must be positive")
    scenario = _load(args.scenario)
    vt, _ = _values(args, scenario)
    sol, doc = _equilibrium(args.equilibrium, scenario, vt)
    seed = _seed(args, scenario)
    mean, se = monte_carlo_value(scenario, sol, vt, args.n, seed)
    k = min(args.log_rollouts, args.n)
    subseeds = np.random.SeedSequence(seed).generate_state(max(k, 1))
    logs = [rollout(scenario, sol, vt, seed=int(subseeds[i])) for i in range(k)]
    outputs = [io.write_rollouts(args.out / "rollouts.jsonl", logs)]
    base = doc.get("baseline")
    if args.baseline:
        b = full_information_baseline(scenario, vt, _config(scenario, "phase1", args))
        base = b.to_dict()
    print(f"analytic value {sol.value:.6f}   empirical {mean:.6f}"
          + ("" if se is None else f" +/- {se:.6f}") + f"   (n={args.n})")
    report_doc = {"schema_version": io.SCHEMA_VERSION, "kind": "comparison", "n": args.n,
                  "seed": seed}
    if base is not None:
        rep = comparison_report(sol.value, base["value"], (mean, se), base["phase1_share"])
        print(rep.table())
        report_doc.update(rep.to_dict())
    else:
        report_doc.update({"analytic_value": sol.value, "empirical_mean": mean,
                           "empirical_stderr": se})
    outputs.append(io.write_json(args.out / "comparison.json", report_doc))
    _manifest(args, argv, "simulate", scenario, {"n": args.n, "baseline": args.baseline}, outputs,
              started)
    return EXIT_OK


def cmd_verify(args, argv, started) -> int:
    scenario = _load(args.scenario)
    vt, _ = _values(args, scenario)
    sol, _ = _equilibrium(args.equilibrium, scenario, vt)
    vcfg = _config(scenario, "verify", args, restarts=scenario.solver.get("verify", {}).get("restarts", 8))
    report = verify_equilibrium(sol, vcfg, args.tolerance)
    print(json.dumps(report.to_dict(), indent=1))
    _manifest(args, argv, "verify", scenario, {"verify": vcfg.__dict__}, [], started)
    return EXIT_OK if report.passed else EXIT_VERIFY


COMMANDS = {"validate": cmd_validate, "solve-phase2": cmd_phase2, "solve-phase1": cmd_phase1,
            "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.jobs = (os.cpu_count() or 1) if args.jobs is None else max(1, args.jobs)
    args.out = Path("out") if args.out is None else args.out
    args.tolerance = DEVIATION_TOL if args.tolerance is None else args.tolerance
    started = _dt.datetime.now(_dt.timezone.utc)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, argv, started)
    except (InputError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
