import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concealgame.env import Representation, build_transition, load_bundled, load_scenario
from concealgame.phase2 import (PolicyTable, brute_force_sad_oracle, build_value_tables,
                                cell_seed, evaluate_policy, evaluate_policy_full,
                                lp_state_values, policy_from_occupancy, regularized_start,
                                simplex_grid, solve_sad_mdp, solve_unconstrained_mdp,
                                value_iteration)
from concealgame.solvers import MultiStartConfig

from conftest import corridor_doc

BETA = 0.95


@pytest.fixture
def corridor():
    sc = load_scenario(corridor_doc())
    return sc, build_transition(sc, 0)


def delta(k, cell):
    mu = np.zeros(k.n_states)
    mu[k.index(cell)] = 1.0
    return mu


def test_corridor_right_policy_values(corridor):
    sc, k = corridor
    right = PolicyTable.for_kernel(np.array([[0, 0, 0, 1.0]]), sc.representations[0], k)
    occ, v0 = evaluate_policy(k, right, delta(k, (0, 0)), BETA)
    assert v0 == pytest.approx(-0.1 - 0.095 + 0.9025, abs=1e-12)
    _, v1 = evaluate_policy(k, right, delta(k, (1, 0)), BETA)
    assert v1 == pytest.approx(0.85, abs=1e-12)
    assert occ.flow_residual(k, right.state_policy(), BETA) < 1e-12
    # the goal pays exactly once: occupancy of the goal cell is beta**2
    assert occ.d[k.index((2, 0))] == pytest.approx(BETA ** 2)


def test_dead_end_policy(corridor):
    sc, k = corridor
    left = PolicyTable.for_kernel(np.array([[0, 0, 1.0, 0]]), sc.representations[0], k)
    _, v = evaluate_policy(k, left, delta(k, (0, 0)), BETA)
    assert v == pytest.approx(-0.1 / (1 - BETA), abs=1e-12)


def test_unconstrained_examples(corridor):
    _, k = corridor
    occ, v = solve_unconstrained_mdp(k, delta(k, (0, 0)), BETA)
    assert v == pytest.approx(0.7075, abs=1e-9)
    pi = policy_from_occupancy(occ)
    assert pi[k.index((0, 0))] == pytest.approx([0, 0, 0, 1])
    _, vg = solve_unconstrained_mdp(k, delta(k, (2, 0)), BETA)
    assert vg == pytest.approx(1.0, abs=1e-9)
    assert value_iteration(k, BETA)[k.index((0, 0))] == pytest.approx(0.7075, abs=1e-10)


def test_walled_in_cell():
    sc = load_scenario({"grid": {"width": 3, "height": 3, "goal": [[2, 0]], "start": [0, 0],
                                 "blocked": [[0, 1], [1, 1], [2, 1], [1, 2], [2, 2]]},
                        "barriers": [{"id": 1, "blocked": []}],
                        "representations": [{"finest": True}], "prior": [1.0], "horizon": 1,
                        "discount": BETA})
    k = build_transition(sc)
    _, v = solve_unconstrained_mdp(k, delta(k, (0, 2)), BETA)
    assert v == pytest.approx(-2.0, abs=1e-9)
    assert lp_state_values(k, BETA)[k.index((0, 2))] == pytest.approx(-2.0, abs=1e-9)


def test_policy_from_occupancy_rules():
    nu = np.array([[0.3, 0.1, 0.0, 0.0], [0, 0, 0, 0], [0, 2.0, 0, 0]])
    pi = policy_from_occupancy(nu)
    assert pi[0] == pytest.approx([0.75, 0.25, 0, 0])
    assert pi[1] == pytest.approx([0.25] * 4)
    assert pi[2] == pytest.approx([0, 1, 0, 0])


def test_sad_corridor_single_superstate(corridor):
    sc, k = corridor
    sol = solve_sad_mdp(k, sc.representations[0], delta(k, (0, 0)), BETA)
    assert sol.value == pytest.approx(0.7075, abs=1e-6)
    assert sol.policy.rows[0] == pytest.approx([0, 0, 0, 1], abs=1e-6)


def test_sad_finest_equals_unconstrained():
    sc = load_bundled("oracle_ring")
    k = build_transition(sc, 0)
    rep = Representation.finest(sc.grid)
    mu = regularized_start(k, k.index(sc.grid.start))
    sol = solve_sad_mdp(k, rep, mu, BETA, MultiStartConfig(restarts=4))
    _, v = solve_unconstrained_mdp(k, mu, BETA)
    assert sol.value == pytest.approx(v, abs=1e-6)


def test_coarse_obstacle_optimum_is_mixed():
    sc = load_bundled("oracle_coarse_obstacle")
    k = build_transition(sc, 0)
    mu = regularized_start(k, k.index(sc.grid.start))
    sol = solve_sad_mdp(k, sc.representations[0], mu, BETA)
    g = sc.representations[0].cell_to_superstate[(1, 1)]
    row = sol.policy.rows[g]
    assert row.max() <= 0.999
    assert row == pytest.approx([0.5, 0, 0.5, 0], abs=1e-4)
    assert sol.state_values[k.index((1, 1))] == pytest.approx(0.455786, abs=1e-5)
    oracle = brute_force_sad_oracle(k, sc.representations[0], mu, BETA, 0.05)
    assert sol.value >= oracle - 1e-9


def test_optimal_row_depends_on_start():
    sc = load_bundled("mu_dependence")  # G a a a a G, start at (3, 0)
    k = build_transition(sc, 0)
    rep = sc.representations[0]
    g = rep.cell_to_superstate[(1, 0)]
    near_left = solve_sad_mdp(k, rep, regularized_start(k, k.index((1, 0))), BETA)
    near_right = solve_sad_mdp(k, rep, regularized_start(k, k.index((3, 0))), BETA)
    assert near_left.policy.rows[g] == pytest.approx([0, 0, 1, 0], abs=1e-6)
    assert near_right.policy.rows[g] == pytest.approx([0, 0, 0, 1], abs=1e-6)
    assert near_left.state_values[k.index((1, 0))] == pytest.approx(0.85, abs=1e-6)


def test_oracle_examples(corridor):
    sc, k = corridor
    assert brute_force_sad_oracle(k, sc.representations[0], delta(k, (0, 0)), BETA, 0.05) == \
        pytest.approx(0.7075, abs=1e-9)
    sc2 = load_bundled("oracle_hook")
    k2 = build_transition(sc2, 0)
    mu = regularized_start(k2, k2.index(sc2.grid.start))
    sol = solve_sad_mdp(k2, sc2.representations[0], mu, BETA)
    assert sol.value >= brute_force_sad_oracle(k2, sc2.representations[0], mu, BETA, 0.1) - 1e-6


def test_oracle_single_state_goal():
    sc = load_scenario(corridor_doc(length=2))
    k = build_transition(sc, 0)
    assert brute_force_sad_oracle(k, sc.representations[0], delta(k, (1, 0)), BETA) == 1.0


def test_oracle_guard_and_grid():
    assert simplex_grid(4, 0.5).shape == (10, 4)
    with pytest.raises(ValueError):
        simplex_grid(4, 0.3)
    sc = load_bundled("oracle_hook")
    k = build_transition(sc, 0)
    with pytest.raises(ValueError, match="guard"):
        brute_force_sad_oracle(k, Representation.finest(sc.grid), np.ones(k.n_states) / k.n_states,
                               BETA)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_lp_matches_value_iteration_on_random_grids(seed):
    rng = np.random.default_rng(seed)
    walls = [[int(x), int(y)] for x, y in rng.integers(0, 5, size=(4, 2))
             if (x, y) not in ((0, 0), (4, 4))]
    sc = load_scenario({"grid": {"width": 5, "height": 5, "goal": [[4, 4]], "start": [0, 0],
                                 "blocked": walls},
                        "barriers": [{"id": 1, "blocked": []}], "representations": [{"finest": True}],
                        "prior": [1.0], "horizon": 1, "discount": BETA}) if _connected(walls) else None
    if sc is None:
        return
    k = build_transition(sc)
    assert lp_state_values(k, BETA) == pytest.approx(value_iteration(k, BETA), abs=1e-6)


def _connected(walls):
    from collections import deque
    blocked = {tuple(w) for w in walls}
    seen, q = {(0, 0)}, deque([(0, 0)])
    while q:
        x, y = q.popleft()
        for n in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= n[0] < 5 and 0 <= n[1] < 5 and n not in blocked and n not in seen:
                seen.add(n)
                q.append(n)
    return (4, 4) in seen


def test_value_tables_finest_type_and_parallel():
    sc = load_bundled("corridor_game")
    cfg = MultiStartConfig(restarts=4)
    vt = build_value_tables(sc, config=cfg)
    k = build_transition(sc, 1)
    vi = value_iteration(k, BETA)
    for s in vt.states:
        assert vt.values[0, 1, s] == pytest.approx(vi[s], abs=1e-6)
    par = build_value_tables(sc, config=cfg, jobs=2)
    assert np.allclose(par.values, vt.values, equal_nan=True)
    full = build_value_tables(sc, config=cfg, all_states=True)
    assert len(full.states) == k.n_states > len(vt.states)
    with pytest.raises(KeyError):
        vt.vector(0, k.index((0, 0)))


def test_value_tables_restricted_and_policies():
    sc = load_bundled("oracle_coarse_obstacle")
    k = build_transition(sc, 0)
    s = k.index((1, 1))
    vt = build_value_tables(sc, restrict_to=[s])
    assert vt.states[0] == s
    assert vt.values[0, 0, s] == pytest.approx(0.455786, abs=1e-5)
    rows = vt.policies[0, 0, s]
    ev = evaluate_policy_full(k, PolicyTable.for_kernel(rows, sc.representations[0], k),
                              regularized_start(k, s), BETA)
    assert ev.V[s] == pytest.approx(vt.values[0, 0, s], abs=1e-12)


def test_cell_seed_deterministic():
    assert cell_seed(0, 1, 0, 5) == cell_seed(0, 1, 0, 5) != cell_seed(0, 1, 1, 5)
