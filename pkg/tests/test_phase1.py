import numpy as np
import pytest

from concealgame.env import build_transition, load_bundled, load_scenario, scenario_to_dict
from concealgame.phase1.equilibrium import (attacker_value_recursion, defender_best_response,
                                            defender_value_recursion, extract_attacker_strategy,
                                            full_information_baseline, leaf_payoffs,
                                            node_policies_from_stationary, solve_phase1_sad,
                                            unrestricted_values, verify_equilibrium)
from concealgame.phase1.program import (MissingValueError, OccupationTree, Phase1Problem,
                                        evaluate_objective, induced_occupation, leaf_value,
                                        occupation_residuals, solve_phase1_lp)
from concealgame.phase2 import ValueTable, build_value_tables
from concealgame.solvers import MultiStartConfig

from conftest import REF_S6, REF_S6P, injected_scenario, injected_tables

UP, DOWN, LEFT, RIGHT = range(4)
BETA = 0.95


def tie_belief():
    """Type-1 posterior at which the Defender is indifferent at s6'."""
    (c, d), (e, f) = REF_S6P
    r = (e - f) / (d - c)
    return np.array([r / (1 + r), 1 / (1 + r)])


@pytest.fixture(scope="module")
def injected():
    sc = injected_scenario()
    vt, s6, s6p = injected_tables(sc)
    sol = solve_phase1_sad(sc, vt, MultiStartConfig(restarts=8))
    return sc, vt, sol


@pytest.fixture(scope="module")
def game():
    sc = load_bundled("corridor_game")
    vt = build_value_tables(sc, config=MultiStartConfig(restarts=4))
    return sc, vt, Phase1Problem(sc, vt)


def pure_rows(problem, k, action):
    rows = np.zeros((problem.n_groups[k], 4))
    rows[:, action] = 1.0
    return rows


# --- occupations -----------------------------------------------------------------

def test_deterministic_occupation_is_a_path(game):
    sc, vt, pb = game
    x = pb.join([pure_rows(pb, 0, UP), pure_rows(pb, 1, UP)])
    occ = induced_occupation(pb, x)
    up_path = [pb.tree.node_from_key("U" * t) for t in range(pb.T + 1)]
    for k in range(2):
        assert occ.mass[k, up_path] == pytest.approx(0.5 * BETA ** np.arange(pb.T + 1))
        assert np.count_nonzero(occ.leaf_mass()[k]) == 1
    assert max(occupation_residuals(pb, occ).values()) <= 1e-12


def test_uniform_single_step_occupation(game):
    sc, vt, _ = game
    pb = Phase1Problem(sc, vt, horizon=1)
    x = pb.join([np.full((g, 4), 0.25) for g in pb.n_groups])
    occ = induced_occupation(pb, x)
    assert occ.z[:, 0, :] == pytest.approx(np.full((2, 4), 0.125))


def test_point_a_mixture_masses(injected):
    sc, vt, _ = injected
    pb = Phase1Problem(sc, vt)
    rows = pure_rows(pb, 0, UP)
    a = pb.reps[0].cell_to_superstate[(0, 4)]
    rows[a] = [0.36, 0, 0, 0.64]
    x = pb.join([rows, pure_rows(pb, 1, UP)])
    occ = induced_occupation(pb, x)
    m = occ.mass[0, pb.tree.offsets[3]:pb.tree.offsets[4]]
    up, right = m[pb.tree.node_from_key("UUU") - pb.tree.offsets[3]], \
        m[pb.tree.node_from_key("UUR") - pb.tree.offsets[3]]
    assert up / right == pytest.approx(9 / 16)
    assert np.count_nonzero(occ.leaf_mass()[0] > 0) == 2


# --- leaf values and objective --------------------------------------------------------

def test_leaf_value_examples():
    best, tie = leaf_value([1.0, 0.0], REF_S6)
    assert tie == [0] and best == pytest.approx(-0.670)
    b = tie_belief()
    best, tie = leaf_value(b, REF_S6P, tol=1e-9)
    assert tie == [0, 1] and best == pytest.approx(-0.141, abs=1e-3)
    assert b == pytest.approx([0.26, 0.74], abs=0.005)
    assert leaf_value([0.0, 0.0], REF_S6) == (0.0, [0, 1])


def test_objective_of_empty_occupation(game):
    _, _, pb = game
    occ = OccupationTree(pb.tree, np.zeros((2, pb.tree.n_nodes)), np.zeros((2, pb.tree.n_internal, 4)),
                         np.zeros(pb.tree.n_internal), np.zeros(pb.tree.n_leaves), pb.prior, BETA)
    assert evaluate_objective(occ) == 0.0


def test_single_path_closed_form(game):
    sc, vt, pb = game
    x = pb.join([pure_rows(pb, 0, UP), pure_rows(pb, 1, UP)])
    occ = induced_occupation(pb, x)
    k = pb.kernel
    cells = [(2, 3), (2, 2), (2, 1)]
    stage = sum(BETA ** t * k.rewards[k.index(c), UP] for t, c in enumerate(cells))
    sT = k.index((2, 0))
    leaf = min(0.5 * vt.values[0, w, sT] + 0.5 * vt.values[1, w, sT] for w in range(2))
    assert evaluate_objective(occ) == pytest.approx(stage + BETA ** 3 * leaf, abs=1e-12)
    assert pb.value(x) == pytest.approx(evaluate_objective(occ), abs=1e-12)


# --- programs -----------------------------------------------------------------------------

def test_single_type_lp_matches_backward_induction(game):
    sc, vt, _ = game
    pb = Phase1Problem(sc, vt, types=[1], prior=[1.0])
    _, value = solve_phase1_lp(pb)
    J = unrestricted_values(pb, pb.Vleaf.min(axis=1))
    assert value == pytest.approx(J[0, 0], abs=1e-9)


def test_lp_occupation_is_feasible(game):
    _, _, pb = game
    occ, value = solve_phase1_lp(pb)
    res = occupation_residuals(pb, occ)
    assert res["root"] <= 1e-9 and res["flow"] <= 1e-9
    assert evaluate_objective(occ) == pytest.approx(value, abs=1e-8)


def test_zero_horizon(game):
    sc, vt, _ = game
    pb = Phase1Problem(sc, vt, horizon=0)
    _, value = solve_phase1_lp(pb)
    s0 = pb.kernel.index(sc.grid.start)
    expect = min(0.5 * vt.values[0, w, s0] + 0.5 * vt.values[1, w, s0] for w in range(2))
    assert value == pytest.approx(expect)


def test_relaxation_bounds_reference_value(injected):
    _, _, sol = injected
    assert sol.lp_value >= -0.841 - 1e-6
    assert sol.lp_value >= sol.value - 1e-6


def test_missing_leaf_values_raise(game):
    sc, vt, _ = game
    V = vt.values.copy()
    V[:, :, vt.states[1]] = np.nan
    with pytest.raises(MissingValueError):
        Phase1Problem(sc, ValueTable(V, vt.policies, vt.states, vt.cells))


def test_identical_types_need_no_concealment():
    doc = scenario_to_dict(load_bundled("corridor_game"))
    doc["representations"] = [doc["representations"][0]] * 2
    sc = load_scenario(doc)
    vt = build_value_tables(sc, config=MultiStartConfig(restarts=4))
    sol = solve_phase1_sad(sc, vt, MultiStartConfig(restarts=4))
    assert sol.value == pytest.approx(sol.lp_value, abs=1e-6)


# --- reference example with injected leaf tables ------------------------------------------

def test_injected_equilibrium_matches_reference_outcome(injected):
    sc, vt, sol = injected
    pb = sol.problem
    type2 = sol.policies[1]
    leaf_mass = sol.occupation.leaf_mass()[0] / (0.5 * BETA ** 6)
    p_up = leaf_mass[pb.tree.leaf_index(pb.tree.node_from_key("UUUUUU"))]
    assert p_up == pytest.approx(0.36, abs=0.01)
    # every other type-1 leaf ends at s6
    s6 = pb.kernel.index((4, 4))
    other = np.flatnonzero(leaf_mass > 1e-12)
    ends = pb.tree.level_states[-1][other]
    assert set(ends.tolist()) == {s6, pb.kernel.index((0, 0))}
    assert type2[0] == pytest.approx([1, 0, 0, 0], abs=1e-6)
    assert sol.value == pytest.approx(-0.841, abs=2e-3)
    leaf_up = pb.tree.node_from_key("UUUUUU")
    assert sol.beliefs[leaf_up] == pytest.approx(tie_belief(), abs=1e-4)
    assert sol.beliefs[leaf_up] == pytest.approx([0.26, 0.74], abs=0.005)
    for n in other + pb.tree.offsets[-2]:
        if pb.tree.node_state[n] == s6:
            assert sol.beliefs[n] == pytest.approx([1.0, 0.0])
            assert sol.sigma[n] == pytest.approx([1.0, 0.0])
    # the deterring mixture, frozen from the mixture LP
    assert sol.sigma[leaf_up] == pytest.approx([0.8544, 0.1456], abs=1e-3)
    rep = verify_equilibrium(sol)
    assert rep.passed, rep.to_dict()


def test_injected_equilibrium_type_shares(injected):
    _, _, sol = injected
    J = sol.type_values()
    assert float(sol.problem.prior @ J) == pytest.approx(sol.value, abs=1e-10)
    pb = sol.problem
    leaf_up = pb.tree.node_from_key("UUUUUU")
    p = sol.occupation.mass[0, leaf_up] / (0.5 * BETA ** 6)
    b = tie_belief()
    (c, _), (e, _) = REF_S6P
    sigma = sol.sigma[sol.problem.tree.node_from_key("UUUUUU")]
    # type 1's Phase-II share: right branch pays V(s6, w1), the up branch the mixture
    share = (1 - p) * REF_S6[0][0] + p * (sigma @ REF_S6P[0])
    stage = J[0] - share
    assert stage == pytest.approx(sum(-0.1 * BETA ** t for t in range(6)), abs=1e-9)
    assert b[0] == pytest.approx(0.5 * p / (0.5 * p + 0.5), abs=1e-4)


def test_skewed_prior_pools_on_up_path():
    sc = injected_scenario((0.2, 0.8))
    vt, _, _ = injected_tables(sc)
    sol = solve_phase1_sad(sc, vt, MultiStartConfig(restarts=8))
    pb = sol.problem
    a = pb.reps[0].cell_to_superstate[(0, 4)]
    assert sol.policies[0][a] == pytest.approx([1, 0, 0, 0], abs=1e-6)
    leaf = pb.tree.node_from_key("UUUUUU")
    assert sol.sigma[leaf] == pytest.approx([0.0, 1.0])
    assert sol.beliefs[leaf] == pytest.approx([0.2, 0.8])


def test_injected_baseline(injected):
    sc, vt, _ = injected
    base = full_information_baseline(sc, vt, MultiStartConfig(restarts=8))
    assert base.phase1_share == pytest.approx(-0.530, abs=1e-3)
    assert base.value == pytest.approx(-0.978, abs=2e-3)
    pb = Phase1Problem(sc, vt)
    s6 = pb.kernel.index((4, 4))
    assert base.assignments[0] and set(base.assignments[0].values()) == {0}
    assert {pb.tree.node_state[pb.tree.node_from_key(k)] for k in base.assignments[0]} == {s6}
    assert base.assignments[1] == {"UUUUUU": 1}


def test_single_type_baseline_equals_sad(game):
    sc, vt, _ = game
    doc = scenario_to_dict(sc)
    doc["representations"] = doc["representations"][:1]
    doc["prior"] = [1.0]
    one = load_scenario(doc)
    vt1 = ValueTable(vt.values[:1], {}, vt.states, vt.cells)
    base = full_information_baseline(one, vt1)
    sol = solve_phase1_sad(one, vt1)
    assert base.value == pytest.approx(sol.value, abs=1e-9)


# --- strategies and recursions ------------------------------------------------------------

def test_extract_attacker_strategy(game):
    _, _, pb = game
    n_int = pb.tree.n_internal
    z = np.zeros((2, n_int, 4))
    z[:, 0] = [0.18, 0, 0.32, 0]
    occ = OccupationTree(pb.tree, np.zeros((2, pb.tree.n_nodes)), z, np.zeros(n_int),
                         np.zeros(pb.tree.n_leaves), pb.prior, BETA)
    pol = extract_attacker_strategy(occ)
    assert pol[0, 0] == pytest.approx([0.36, 0, 0.64, 0])
    assert pol[1, 1] == pytest.approx([0.25] * 4)


def test_defender_best_response_examples():
    assert defender_best_response([1, 0], REF_S6) == ([0], pytest.approx(-0.670))
    assert defender_best_response([0, 1], REF_S6) == ([1], pytest.approx(-0.033))
    ties, v = defender_best_response(tie_belief(), REF_S6P)
    assert ties == [0, 1] and v == pytest.approx(-0.141, abs=1e-3)


def test_defender_best_response_from_table(injected):
    _, vt, _ = injected
    k = build_transition(injected[0])
    assert defender_best_response([1, 0], vt, k.index((4, 4)))[0] == [0]
    with pytest.raises(KeyError):
        defender_best_response([1, 0], vt, k.index((4, 0)))


def test_attacker_recursion_examples(game):
    sc, vt, _ = game
    pb = Phase1Problem(sc, vt, horizon=1)
    x = pb.join([pure_rows(pb, 0, UP), pure_rows(pb, 1, UP)])
    pol = node_policies_from_stationary(pb, x)
    sigma = np.tile([0.0, 1.0], (pb.tree.n_leaves, 1))
    lam = leaf_payoffs(pb, sigma)
    s1 = pb.kernel.index((2, 2))
    leaf = pb.tree.child(0, UP)
    assert lam[0, pb.tree.leaf_index(leaf)] == pytest.approx(vt.values[0, 1, s1])
    J = attacker_value_recursion(pb, 0, 0, pol, lam)
    assert J == pytest.approx(-0.1 + BETA * vt.values[0, 1, s1])


def test_defender_recursion_consistency(injected):
    _, _, sol = injected
    pb = sol.problem
    pol, lam = sol.node_policies(), sol.leaf_payoffs()
    root = defender_value_recursion(pb, 0, pb.prior, pol, lam)
    assert root == pytest.approx(evaluate_objective(sol.occupation), abs=1e-8)
    fact = defender_value_recursion(pb, 0, pb.prior, pol, lam, factored=True)
    assert fact == pytest.approx(root, abs=1e-10)
    for alpha in (0.1, 2.5, 10.0):
        assert defender_value_recursion(pb, 0, alpha * pb.prior, pol, lam) == \
            pytest.approx(alpha * root, abs=1e-9)


def test_single_type_defender_equals_attacker(game):
    sc, vt, _ = game
    pb = Phase1Problem(sc, vt, types=[0], prior=[1.0])
    x = pb.domain.sample(np.random.default_rng(1))
    pol = node_policies_from_stationary(pb, x)
    lam = pb.Vleaf.min(axis=1)
    assert defender_value_recursion(pb, 0, [1.0], pol, lam) == \
        pytest.approx(attacker_value_recursion(pb, 0, 0, pol, lam))


# --- derivatives ----------------------------------------------------------------------------

def test_gradient_matches_finite_differences(game):
    _, _, pb = game
    rng = np.random.default_rng(4)
    x = pb.domain.sample(rng)
    g = pb.gradient(x)
    h = 1e-6
    for i in rng.choice(pb.n_vars, 12, replace=False):
        e = np.zeros(pb.n_vars)
        e[i] = h
        fd = (pb.value(x + e) - pb.value(x - e)) / (2 * h)
        assert g[i] == pytest.approx(fd, abs=1e-6)


def test_mass_jacobian_matches_finite_differences(game):
    _, _, pb = game
    rng = np.random.default_rng(5)
    x = pb.domain.sample(rng)
    Js = pb.mass_jacobian(x)
    h = 1e-7
    for i in rng.choice(pb.n_vars, 6, replace=False):
        e = np.zeros(pb.n_vars)
        e[i] = h
        mp = induced_occupation(pb, x + e).mass
        mm = induced_occupation(pb, x - e).mass
        for k in range(pb.n_types):
            fd = (mp[k] - mm[k]) / (2 * h)
            assert np.asarray(Js[k][:, i].todense()).ravel() == pytest.approx(fd, abs=1e-6)


def test_polish_never_hurts(game):
    _, _, pb = game
    x = pb.domain.sample(np.random.default_rng(2))
    y = pb.polish(x)
    assert pb.domain.contains(y, 1e-9)
    assert pb.value(y) >= pb.value(x) - 1e-12
