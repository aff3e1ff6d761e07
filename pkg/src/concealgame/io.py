"""Versioned documents: value tables, equilibria, rollout logs and run manifests."""
from __future__ import annotations

import csv
import datetime as _dt
import json
from pathlib import Path

import numpy as np

from . import __version__
from .env import Scenario
from .phase1.equilibrium import EquilibriumSolution, assemble_solution
from .phase1.program import Phase1Problem
from .phase2 import ValueTable

SCHEMA_VERSION = 1


def _cell_key(c) -> str:
    return f"{c[0]},{c[1]}"


def _parse_cell(key: str) -> tuple[int, int]:
    x, y = key.split(",")
    return int(x), int(y)


# --- value tables ---------------------------------------------------------------------

def value_csv_name(theta: int, omega_id: int) -> str:
    return f"values_theta{theta + 1}_omega{omega_id}.csv"


def write_value_tables(vt: ValueTable, scenario: Scenario, outdir: Path) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sink = len(vt.cells)  # kernel cells exclude the sink
    paths = []
    for th in range(vt.n_types):
        for w, barrier in enumerate(scenario.barriers):
            p = outdir / value_csv_name(th, barrier.id)
            with p.open("w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["x", "y", "V"])
                for s in vt.states:
                    if s == sink or np.isnan(vt.values[th, w, s]):
                        continue
                    x, y = vt.cells[s]
                    wr.writerow([x, y, repr(float(vt.values[th, w, s]))])
            paths.append(p)
    p = outdir / "values.json"
    p.write_text(json.dumps(value_table_to_dict(vt, scenario), indent=1))
    paths.append(p)
    return paths


def value_table_to_dict(vt: ValueTable, scenario: Scenario) -> dict:
    sink = len(vt.cells)  # kernel cells exclude the sink
    entries = []
    for (th, w, s), rows in sorted(vt.policies.items()):
        if s == sink:
            continue
        entries.append({"theta": th, "omega": w, "cell": list(vt.cells[s]),
                        "value": float(vt.values[th, w, s]),
                        "rows": np.asarray(rows, float).tolist()})
    return {"schema_version": SCHEMA_VERSION, "kind": "value_table", "scenario": scenario.name,
            "seed": vt.seed, "n_types": vt.n_types, "n_barriers": vt.n_barriers,
            "barrier_ids": [b.id for b in scenario.barriers],
            "states": [_cell_key(vt.cells[s]) for s in vt.states if s != sink],
            "entries": entries}


def value_table_from_dict(doc: dict, scenario: Scenario) -> ValueTable:
    if doc.get("kind") != "value_table":
        raise ValueError("document is not a value table")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('schema_version')}")
    from .env import build_transition

    kern = build_transition(scenario, None)
    values = np.full((doc["n_types"], doc["n_barriers"], kern.n_states), np.nan)
    policies = {}
    for e in doc["entries"]:
        s = kern.index(tuple(e["cell"]))
        values[e["theta"], e["omega"], s] = e["value"]
        policies[e["theta"], e["omega"], s] = np.asarray(e["rows"], float)
    states = sorted(kern.index(_parse_cell(k)) for k in doc["states"])
    values[:, :, kern.sink] = 0.0
    for th in range(values.shape[0]):
        for w in range(values.shape[1]):
            policies[th, w, kern.sink] = np.full(
                (len(scenario.representations[th]), 4), 0.25)
    return ValueTable(values, policies, states, kern.cells, int(doc.get("seed", 0)))


def read_value_tables(path, scenario: Scenario) -> ValueTable:
    return value_table_from_dict(json.loads(Path(path).read_text()), scenario)


# --- equilibria -------------------------------------------------------------------------

def equilibrium_to_dict(sol: EquilibriumSolution) -> dict:
    problem = sol.problem
    tree = problem.tree
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "equilibrium",
        "scenario": problem.scenario.name,
        "seed": sol.seed,
        "value": sol.value,
        "lp_value": sol.lp_value,
        "phase1_stage_value": sol.stage_share(),
        "type_values": sol.type_values().tolist(),
        "deterrence_gain": sol.deterrence_gain,
        "policies": [{"type": int(t), "rows": rows.tolist()}
                     for t, rows in zip(problem.types, sol.policies)],
        "sigma": {tree.key(n): np.asarray(m, float).tolist() for n, m in sorted(sol.sigma.items())},
        "beliefs": {tree.key(n): np.asarray(b, float).tolist() for n, b in sorted(sol.beliefs.items())},
    }
    if sol.baseline is not None:
        doc["baseline"] = sol.baseline.to_dict()
    if sol.report is not None:
        doc["verification"] = sol.report.to_dict()
    return doc


def equilibrium_from_dict(doc: dict, scenario: Scenario, values: ValueTable) -> EquilibriumSolution:
    """Rebuild a solution from its policies, keeping the stored mixtures and beliefs."""
    if doc.get("kind") != "equilibrium":
        raise ValueError("document is not an equilibrium")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc.get('schema_version')}")
    problem = Phase1Problem(scenario, values)
    rows = sorted(doc["policies"], key=lambda p: p["type"])
    x = problem.join([np.asarray(p["rows"], float) for p in rows])
    if x.size != problem.n_vars:
        raise ValueError("policy rows do not match the scenario's representations")
    sol = assemble_solution(problem, x, seed=int(doc.get("seed", 0)))
    tree = problem.tree
    sol.sigma = {tree.node_from_key(k): np.asarray(v, float) for k, v in doc["sigma"].items()}
    sol.beliefs = {tree.node_from_key(k): np.asarray(v, float) for k, v in doc["beliefs"].items()}
    sol.lp_value = doc.get("lp_value")
    return sol


def write_json(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=False))
    return path


# --- rollouts and manifests ----------------------------------------------------------------

def write_rollouts(path, rollouts) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for r in rollouts:
            fh.write(json.dumps(r.to_dict()) + "\n")
    return path


def read_rollouts(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def run_manifest(command: str, scenario_path, seed: int, config: dict, outputs,
                 started: _dt.datetime, argv=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "run_manifest",
        "tool": "concealgame",
        "version": __version__,
        "command": command,
        "argv": list(argv or []),
        "scenario": str(scenario_path),
        "seed": seed,
        "config": config,
        "outputs": [str(p) for p in outputs],
        "started": started.isoformat(timespec="seconds"),
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
