import functools

import numpy as np
import pytest

from concealgame.env import build_transition, load_bundled, load_scenario, reachable_states
from concealgame.phase1.equilibrium import (full_information_baseline, solve_phase1_sad,
                                            verify_equilibrium)
from concealgame.phase1.program import Phase1Problem, solve_phase1_lp
from concealgame.phase2 import ValueTable, build_value_tables

# Phase-II values at the two decisive leaf states of the reference example,
# rows are types and columns barriers.
REF_S6 = [[-0.670, 0.321], [0.109, -0.033]]
REF_S6P = [[-0.800, 0.093], [0.095, -0.225]]


def corridor_doc(length=3, **extra):
    doc = {"name": "corridor", "grid": {"width": length, "height": 1, "goal": [[length - 1, 0]],
                                        "start": [0, 0]},
           "barriers": [{"id": 1, "blocked": []}],
           "representations": [{"superstates": [[[x, 0] for x in range(length)]]}],
           "prior": [1.0], "horizon": 1, "discount": 0.95}
    doc.update(extra)
    return doc


def injected_scenario(prior=(0.5, 0.5)):
    """Open 5x7 field where type 2 sees a single superstate.

    Starting at (0, 6), six Up moves end at (0, 0) and any two Up plus four
    Right moves end at (4, 4).
    """
    return load_scenario({
        "name": "injected",
        "grid": {"width": 5, "height": 7, "blocked": [], "goal": [[4, 0]], "start": [0, 6]},
        "barriers": [{"id": 1, "blocked": [[3, 0]]}, {"id": 2, "blocked": [[4, 1]]}],
        "representations": [{"finest": True},
                            {"rectangles": [{"x0": 0, "y0": 0, "x1": 4, "y1": 6}]}],
        "prior": list(prior), "horizon": 6, "discount": 0.95, "terminal_discount": False})


def injected_tables(scenario, other=-2.0):
    """Reference leaf values at the two decisive states and a poor value elsewhere."""
    k = build_transition(scenario)
    states = reachable_states(k, k.index(scenario.grid.start), scenario.horizon)
    V = np.full((2, 2, k.n_states), np.nan)
    V[:, :, states] = other
    V[:, :, k.sink] = 0.0
    s6, s6p = k.index((4, 4)), k.index((0, 0))
    V[:, :, s6] = REF_S6
    V[:, :, s6p] = REF_S6P
    return ValueTable(V, {}, states, k.cells), s6, s6p


class Solved:
    def __init__(self, scenario, tables, problem, solution, baseline, lp_value):
        self.scenario = scenario
        self.tables = tables
        self.problem = problem
        self.solution = solution
        self.baseline = baseline
        self.lp_value = lp_value


@functools.lru_cache(maxsize=None)
def solve_bundled(name: str) -> Solved:
    sc = load_bundled(name)
    vt = build_value_tables(sc, jobs=4)
    pb = Phase1Problem(sc, vt)
    base = full_information_baseline(sc, vt, problem=pb)
    sol = solve_phase1_sad(sc, vt, problem=pb, seeds=[pb.join(base.policies)])
    sol.baseline = base
    verify_equilibrium(sol)
    _, lp = solve_phase1_lp(pb)
    return Solved(sc, vt, pb, sol, base, lp)


@pytest.fixture(scope="session")
def reconstruction() -> Solved:
    return solve_bundled("reference_reconstruction")


@pytest.fixture(scope="session")
def corridor_game() -> Solved:
    return solve_bundled("corridor_game")


# One summary line per acceptance criterion, printed after the run.
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
