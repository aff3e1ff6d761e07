"""Equilibrium construction and verification for the Phase-I game."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..env import N_ACTIONS, Scenario
from ..phase2 import ValueTable
from ..solvers import (LinearProgram, MultiStartConfig, SolverError, StartTrace,
                       multistart_maximize, projected_ascent, solve_lp)
from .belief import OffEquilibriumObservation, belief_product_form
from .program import (MASS_FLOOR, TIE_TOL, OccupationTree, Phase1Problem, evaluate_objective,
                      induced_occupation, occupation_residuals, solve_phase1_lp)

log = logging.getLogger(__name__)

DEVIATION_TOL = 1e-4
BELIEF_TOL = 1e-10
SUPPORT_TOL = 1e-9
FEASIBILITY_TOL = 1e-9


# --- strategy extraction and best responses ---------------------------------------

def extract_attacker_strategy(occ: OccupationTree, floor: float = MASS_FLOOR) -> np.ndarray:
    """History-level action distributions, shape (types, internal nodes, 4)."""
    zbar = occ.z.sum(axis=2, keepdims=True)
    out = np.full(occ.z.shape, 1.0 / N_ACTIONS)
    pos = np.broadcast_to(zbar > floor, occ.z.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = occ.z / zbar
    out[pos] = ratio[pos]
    return out


def defender_best_response(b, values, s: int | None = None,
                           tol: float = TIE_TOL) -> tuple[list[int], float]:
    """Barriers minimizing the belief-weighted Phase-II value, with the minimum.

    ``values`` is a ValueTable (then ``s`` selects the state) or an array
    ``V[theta, omega]`` for one state.
    """
    b = np.asarray(b, float)
    V = values.values[:, :, s] if isinstance(values, ValueTable) else np.asarray(values, float)
    if np.any(np.isnan(V)):
        raise KeyError(f"no value table entry at state {s}")
    vals = b @ V
    best = float(vals.min())
    return [int(w) for w in np.flatnonzero(vals - best <= tol)], best


# --- value recursions ---------------------------------------------------------------

def node_policies_from_stationary(problem: Phase1Problem, x: np.ndarray) -> np.ndarray:
    sp_ = problem.state_policies(x)
    return sp_[:, problem.tree.node_state[:problem.tree.n_internal]]


def leaf_payoffs(problem: Phase1Problem, sigma) -> np.ndarray:
    """Per-type leaf payoff in objective units, shape (types, leaves).

    ``sigma`` is an array (leaves, barriers) or a mapping leaf-node -> mixture;
    leaves missing from the mapping pay each type its worst barrier.
    """
    if isinstance(sigma, dict):
        lam = problem.Vleaf.min(axis=1).copy()
        leaf0 = problem.tree.offsets[-2]
        for node, mix in sigma.items():
            lam[:, node - leaf0] = problem.Vleaf[:, :, node - leaf0] @ np.asarray(mix, float)
        return lam
    return np.einsum("kwl,lw->kl", problem.Vleaf, np.asarray(sigma, float))


def _type_values(problem: Phase1Problem, node_pol: np.ndarray, lam_leaf: np.ndarray) -> np.ndarray:
    """Per-type values J[k, node] of a history-dependent strategy, by backward induction."""
    tree = problem.tree
    J = np.zeros((problem.n_types, tree.n_nodes))
    J[:, tree.offsets[-2]:] = lam_leaf
    R = problem.kernel.rewards[tree.node_state]
    for t in reversed(range(problem.T)):
        lo, hi = tree.offsets[t], tree.offsets[t + 1]
        child = J[:, tree.offsets[t + 1]:tree.offsets[t + 2]].reshape(problem.n_types, -1, N_ACTIONS)
        q = R[lo:hi][None] + problem.beta * child
        J[:, lo:hi] = np.einsum("kja,kja->kj", node_pol[:, lo:hi], q)
    return J


def attacker_value_recursion(problem: Phase1Problem, node: int, theta: int,
                             node_pol: np.ndarray, lam_leaf: np.ndarray) -> float:
    """Type ``theta``'s value from ``node`` given both players' strategies.

    ``theta`` indexes the problem's types; ``lam_leaf`` comes from ``leaf_payoffs``.
    """
    return float(_type_values(problem, node_pol, lam_leaf)[theta, node])


def defender_value_recursion(problem: Phase1Problem, node: int, b, node_pol: np.ndarray,
                             lam_leaf: np.ndarray, factored: bool = False) -> float:
    """Belief-weighted value at ``node``; ``b`` may be unnormalized.

    The default path sums per-type values. ``factored=True`` recurses on the
    total likelihood of each action and the updated belief, multiplying the two
    back together so zero-likelihood branches contribute nothing.
    """
    b = np.asarray(b, float)
    if not factored:
        return float(b @ _type_values(problem, node_pol, lam_leaf)[:, node])
    tree = problem.tree
    R = problem.kernel.rewards[tree.node_state]

    def rec(h: int, bb: np.ndarray) -> float:
        t, _ = tree.level_of(h)
        if t == problem.T:
            return float(bb @ lam_leaf[:, tree.leaf_index(h)])
        pol = node_pol[:, h]
        chi = bb @ pol
        total = float(chi @ R[h])
        for a in range(N_ACTIONS):
            if chi[a] <= 0.0:
                continue
            post = bb * pol[:, a] / chi[a]
            total += problem.beta * chi[a] * rec(tree.child(h, a), post)
        return total

    return rec(node, b)


def unrestricted_values(problem: Phase1Problem, lam_leaf: np.ndarray) -> np.ndarray:
    """Per-type best history-dependent values against fixed leaf payoffs."""
    tree = problem.tree
    J = np.zeros((problem.n_types, tree.n_nodes))
    J[:, tree.offsets[-2]:] = lam_leaf
    R = problem.kernel.rewards[tree.node_state]
    for t in reversed(range(problem.T)):
        lo, hi = tree.offsets[t], tree.offsets[t + 1]
        child = J[:, tree.offsets[t + 1]:tree.offsets[t + 2]].reshape(problem.n_types, -1, N_ACTIONS)
        J[:, lo:hi] = (R[lo:hi][None] + problem.beta * child).max(axis=2)
    return J


# --- defender mixture at indifferent leaves ----------------------------------------------

def select_sigma(problem: Phase1Problem, x: np.ndarray, occ: OccupationTree,
                 tol: float = TIE_TOL) -> tuple[dict[int, np.ndarray], float]:
    """Mixtures at positive-mass leaves, chosen to deter attacker deviations.

    Untied leaves get the pure minimizer. At tied leaves the mixture over the tie
    set minimizes the largest per-type first-order gain from moving that type's
    superstate rows, holding everything else fixed. Returns the mixtures and
    that gain.
    """
    leaf0 = int(problem.tree.offsets[-2])
    m = occ.leaf_mass()
    L = problem.leaf_matrix(m)
    tie = problem.tie_mask(L, m, tol)
    pos = np.flatnonzero(m.sum(axis=0) > MASS_FLOOR)
    nW = problem.n_barriers
    sigma: dict[int, np.ndarray] = {}
    lam0 = problem.Vleaf.min(axis=1).copy()
    tied = []
    for l in pos:
        ws = np.flatnonzero(tie[:, l])
        if ws.size == 1:
            mix = np.zeros(nW)
            mix[ws[0]] = 1.0
            sigma[leaf0 + int(l)] = mix
            lam0[:, l] = problem.Vleaf[:, ws[0], l]
        else:
            tied.append((int(l), ws))
            lam0[:, l] = 0.0
    masses, probs = problem.forward(x)
    g0 = problem.backward(masses, probs, lam0)[0]
    scale = np.repeat(1.0 / problem.prior, [4 * g for g in problem.n_groups])
    g0 = g0 * scale
    blocks = x.reshape(-1, N_ACTIONS)
    nb = blocks.shape[0]
    block_type = np.repeat(np.arange(problem.n_types), problem.n_groups)

    def gains(g):
        gb = g.reshape(nb, N_ACTIONS)
        per = gb.max(axis=1) - (gb * blocks).sum(axis=1)
        return np.bincount(block_type, weights=per, minlength=problem.n_types)

    if not tied:
        return sigma, float(gains(g0).max(initial=0.0))
    Js = [J[leaf0:] for J in problem.mass_jacobian(x)]
    cols = []
    for l, ws in tied:
        for w in ws:
            col = sum(problem.Vleaf[k, w, l] * Js[k][l] for k in range(problem.n_types))
            cols.append(np.asarray(col.todense()).ravel() * scale)
    G = np.column_stack(cols)  # (n_vars, n_sigma)
    nsig = G.shape[1]
    Gb = G.reshape(nb, N_ACTIONS, nsig)
    C = Gb - np.einsum("ba,bas->bs", blocks, Gb)[:, None, :]
    g0b = g0.reshape(nb, N_ACTIONS)
    c0 = g0b - (g0b * blocks).sum(axis=1, keepdims=True)
    # variables: sigma, t per block, s
    nv = nsig + nb + 1
    rows_ub = []
    b_ub = []
    for bi in range(nb):
        for a in range(N_ACTIONS):
            r = np.zeros(nv)
            r[:nsig] = C[bi, a]
            r[nsig + bi] = -1.0
            rows_ub.append(r)
            b_ub.append(-c0[bi, a])
    for k in range(problem.n_types):
        r = np.zeros(nv)
        r[nsig + np.flatnonzero(block_type == k)] = 1.0
        r[-1] = -1.0
        rows_ub.append(r)
        b_ub.append(0.0)
    A_eq = np.zeros((len(tied), nv))
    j = 0
    for i, (_, ws) in enumerate(tied):
        A_eq[i, j:j + ws.size] = 1.0
        j += ws.size
    c = np.zeros(nv)
    c[-1] = -1.0
    lower = np.zeros(nv)
    lower[nsig:] = -np.inf
    res = solve_lp(LinearProgram(c, A_eq=sp.csr_matrix(A_eq), b_eq=np.ones(len(tied)),
                                 A_ub=sp.csr_matrix(np.array(rows_ub)), b_ub=np.array(b_ub),
                                 lower=lower))
    if res.status != "optimal":
        raise SolverError(f"defender mixture LP {res.status}: {res.message}")
    s_vals = np.clip(res.x[:nsig], 0.0, None)
    j = 0
    for l, ws in tied:
        mix = np.zeros(nW)
        mix[ws] = s_vals[j:j + ws.size]
        mix /= mix.sum()
        sigma[leaf0 + l] = mix
        j += ws.size
    return sigma, max(float(-res.value), 0.0)


# --- solutions ---------------------------------------------------------------------

@dataclass
class VerificationReport:
    belief_error: float
    belief_offender: int | None
    support_error: float
    support_offender: int | None
    deviation_gains: list[float]
    unrestricted_gaps: list[float]
    proposition_agreement: bool
    residuals: dict
    value_gap: float
    tolerance: float = DEVIATION_TOL

    @property
    def beliefs_ok(self) -> bool:
        return self.belief_error <= BELIEF_TOL

    @property
    def defender_ok(self) -> bool:
        return self.support_error <= SUPPORT_TOL

    @property
    def attacker_ok(self) -> bool:
        return max(self.deviation_gains, default=0.0) <= self.tolerance

    @property
    def feasible(self) -> bool:
        return max(self.residuals.values(), default=0.0) <= FEASIBILITY_TOL

    @property
    def passed(self) -> bool:
        return (self.beliefs_ok and self.defender_ok and self.attacker_ok and self.feasible
                and self.proposition_agreement and self.value_gap <= 1e-8)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "beliefs": {"ok": self.beliefs_ok, "max_error": self.belief_error,
                        "offending_node": self.belief_offender},
            "defender": {"ok": self.defender_ok, "max_off_support_mass": self.support_error,
                         "offending_node": self.support_offender},
            "attacker": {"ok": self.attacker_ok, "deviation_gains": self.deviation_gains},
            "unrestricted_gaps": self.unrestricted_gaps,
            "proposition_agreement": self.proposition_agreement,
            "occupation_residuals": self.residuals,
            "value_gap": self.value_gap,
        }


@dataclass
class EquilibriumSolution:
    problem: Phase1Problem
    x: np.ndarray
    occupation: OccupationTree
    sigma: dict[int, np.ndarray]
    beliefs: dict[int, np.ndarray]
    value: float
    deterrence_gain: float = 0.0
    lp_value: float | None = None
    baseline: "BaselineResult | None" = None
    report: VerificationReport | None = None
    traces: list[StartTrace] = field(default_factory=list)
    seed: int = 0

    @property
    def policies(self) -> list[np.ndarray]:
        return self.problem.split(self.x)

    def node_policies(self) -> np.ndarray:
        return node_policies_from_stationary(self.problem, self.x)

    def leaf_payoffs(self) -> np.ndarray:
        return leaf_payoffs(self.problem, self.sigma)

    def type_values(self) -> np.ndarray:
        """Each type's value at the root, unweighted by the prior."""
        return _type_values(self.problem, self.node_policies(), self.leaf_payoffs())[:, 0]

    def stage_share(self) -> float:
        return float(self.occupation.stage.sum())


def assemble_solution(problem: Phase1Problem, x: np.ndarray, traces=(), seed: int = 0
                      ) -> EquilibriumSolution:
    occ = induced_occupation(problem, x)
    sigma, gain = select_sigma(problem, x, occ)
    tot = occ.mass.sum(axis=0)
    beliefs = {int(n): occ.mass[:, n] / tot[n] for n in np.flatnonzero(tot > MASS_FLOOR)}
    return EquilibriumSolution(problem, x, occ, sigma, beliefs, evaluate_objective(occ),
                               deterrence_gain=gain, traces=list(traces), seed=seed)


def lp_seed(problem: Phase1Problem, occ: OccupationTree) -> np.ndarray:
    """Stationary rows from aggregating a history occupation over superstates."""
    n_int = problem.tree.n_internal
    rows = []
    for k in range(problem.n_types):
        g = problem.state_groups[k][problem.tree.node_state[:n_int]]
        ng = problem.n_groups[k]
        acc = np.zeros((ng + 1, N_ACTIONS))
        np.add.at(acc, g, occ.z[k])
        acc = acc[:ng]
        tot = acc.sum(axis=1, keepdims=True)
        rows.append(np.where(tot > MASS_FLOOR, acc / np.where(tot > 0, tot, 1.0), 1.0 / N_ACTIONS))
    return problem.join(rows)


def optimize_stationary(problem: Phase1Problem, config: MultiStartConfig, seeds=(),
                        polish_top: int = 4) -> tuple[np.ndarray, float, list[StartTrace]]:
    """Projected ascent from seeds and random restarts, then trust-region polish of the best few."""
    rng = np.random.default_rng(config.seed)
    starts = [np.asarray(s, float) for s in seeds]
    starts += [problem.domain.sample(rng) for _ in range(config.restarts)]
    found = []
    traces = []
    for i, x0 in enumerate(starts):
        try:
            x, f, iters, status = projected_ascent(problem, problem.domain, x0, config)
        except (FloatingPointError, SolverError) as exc:
            log.warning("restart %d aborted: %s", i, exc)
            traces.append(StartTrace(i, math.nan, 0, "aborted"))
            continue
        traces.append(StartTrace(i, f, iters, status))
        if status != "aborted":
            found.append((f, i, x))
    if not found:
        raise SolverError("all restarts failed")
    found.sort(key=lambda r: (-r[0], r[1]))
    best = None
    for f, i, x in found[:polish_top]:
        y = problem.polish(x)
        y = problem.snap_ties(y)
        fy = problem.value(y)
        if fy < f:
            y, fy = x, f
        if best is None or fy > best[0] + 1e-12:
            best = (fy, i, y)
    return best[2], best[0], traces


def solve_phase1_sad(scenario: Scenario, values: ValueTable, config: MultiStartConfig | None = None,
                     problem: Phase1Problem | None = None, seeds=(), use_lp_seed: bool = True,
                     polish_top: int = 4) -> EquilibriumSolution:
    config = config or MultiStartConfig()
    problem = problem or Phase1Problem(scenario, values)
    seeds = list(seeds)
    lp_value = None
    if use_lp_seed:
        occ_lp, lp_value = solve_phase1_lp(problem)
        seeds.insert(0, lp_seed(problem, occ_lp))
    x, _, traces = optimize_stationary(problem, config, seeds, polish_top)
    sol = assemble_solution(problem, x, traces, config.seed)
    sol.lp_value = lp_value
    return sol


# --- full-information baseline -----------------------------------------------------------

@dataclass
class BaselineResult:
    value: float
    type_values: list[float]
    stage_values: list[float]
    policies: list[np.ndarray]
    assignments: list[dict[str, int]]  # leaf action string -> barrier, per type
    prior: list[float]

    @property
    def phase1_share(self) -> float:
        return float(np.dot(self.prior, self.stage_values))

    def to_dict(self) -> dict:
        return {"value": self.value, "type_values": self.type_values,
                "phase1_share": self.phase1_share,
                "policies": [p.tolist() for p in self.policies],
                "assignments": self.assignments}


def full_information_baseline(scenario: Scenario, values: ValueTable,
                              config: MultiStartConfig | None = None,
                              problem: Phase1Problem | None = None) -> BaselineResult:
    """Prior-weighted value when the Defender knows the type before the barrier choice."""
    config = config or MultiStartConfig()
    tvals, stages, pols, assigns = [], [], [], []
    for theta in range(scenario.n_types):
        sub = Phase1Problem(scenario, values, types=[theta], prior=[1.0],
                            tree=None if problem is None else problem.tree)
        occ_lp, _ = solve_phase1_lp(sub)
        x, f, _ = optimize_stationary(sub, config, [lp_seed(sub, occ_lp)], polish_top=2)
        occ = induced_occupation(sub, x)
        tvals.append(float(f))
        stages.append(float(occ.stage.sum()))
        pols.append(sub.split(x)[0])
        m = occ.leaf_mass()[0]
        leaf0 = sub.tree.offsets[-2]
        best_w = sub.Vleaf[0].argmin(axis=0)
        assigns.append({sub.tree.key(leaf0 + int(l)): int(best_w[l])
                        for l in np.flatnonzero(m > MASS_FLOOR)})
    prior = list(scenario.prior)
    return BaselineResult(float(np.dot(prior, tvals)), tvals, stages, pols, assigns, prior)


# --- verification ---------------------------------------------------------------------

class _FixedLeafObjective:
    """One type's value with every leaf payoff held fixed; smooth in its rows."""

    def __init__(self, problem: Phase1Problem, k: int, lam_k: np.ndarray):
        self.sub = Phase1Problem(problem.scenario, problem.values, types=[problem.types[k]],
                                 prior=[1.0], tree=problem.tree)
        self.lam = np.asarray(lam_k, float)[None]
        self.domain = self.sub.domain

    def value(self, x):
        masses, probs = self.sub.forward(x)
        return self.sub.stage_value(masses, probs) + float(masses[-1][0] @ self.lam[0])

    def __call__(self, x):
        masses, probs = self.sub.forward(x)
        v = self.sub.stage_value(masses, probs) + float(masses[-1][0] @ self.lam[0])
        g, gm, _ = self.sub.backward(masses, probs, self.lam)
        return v, (g.reshape(-1, N_ACTIONS) / np.maximum(gm, 1e-300)[:, None]).ravel()


def deviation_gain(problem: Phase1Problem, x: np.ndarray, k: int, lam_k: np.ndarray,
                   config: MultiStartConfig) -> float:
    obj = _FixedLeafObjective(problem, k, lam_k)
    xk = problem.split(x)[k].ravel()
    current = obj.value(xk)
    res = multistart_maximize(obj, obj.domain, config, seeds=[xk])
    return max(float(res.value - current), 0.0)


def verify_equilibrium(sol: EquilibriumSolution, config: MultiStartConfig | None = None,
                       tolerance: float = DEVIATION_TOL) -> VerificationReport:
    problem = sol.problem
    tree = problem.tree
    config = config or MultiStartConfig(restarts=8, seed=sol.seed)
    occ = sol.occupation
    spol = problem.state_policies(sol.x)
    mass_tot = occ.mass.sum(axis=0)
    positive = np.flatnonzero(mass_tot > MASS_FLOOR)

    # (c) beliefs against the product form
    b_err, b_node = 0.0, None
    for n in positive:
        states, acts = tree.history(int(n))
        stored = sol.beliefs.get(int(n))
        try:
            ref = belief_product_form(problem.prior, spol, states[:-1], acts)
        except OffEquilibriumObservation:
            ref = None
        err = math.inf if stored is None or ref is None else float(np.max(np.abs(stored - ref)))
        if err > b_err:
            b_err, b_node = err, int(n)
    if b_err <= BELIEF_TOL:
        b_node = None

    # (b) defender support on the argmin set
    s_err, s_node = 0.0, None
    leaf0 = int(tree.offsets[-2])
    for n in positive[positive >= leaf0]:
        n = int(n)
        b = sol.beliefs.get(n)
        mix = sol.sigma.get(n)
        if b is None or mix is None:
            err = math.inf
        else:
            ties, _ = defender_best_response(b, problem.Vleaf[:, :, n - leaf0])
            off = np.ones(problem.n_barriers, bool)
            off[ties] = False
            err = float(np.asarray(mix)[off].sum())
        if err > s_err:
            s_err, s_node = err, n
    if s_err <= SUPPORT_TOL:
        s_node = None

    # (a) SAD-restricted deviations, and the unrestricted diagnostic
    lam = sol.leaf_payoffs()
    gains = [deviation_gain(problem, sol.x, k, lam[k], config) for k in range(problem.n_types)]
    node_pol = sol.node_policies()
    J = _type_values(problem, node_pol, lam)
    Jstar = unrestricted_values(problem, lam)
    gap_nodes = np.maximum(Jstar - J, 0.0)
    ugaps = [float(g) for g in gap_nodes[:, 0]]

    # Belief-weighted and per-type optimality must agree at nodes with full-support beliefs.
    agree = True
    internal = positive[positive < leaf0]
    for n in internal:
        b = sol.beliefs.get(int(n))
        if b is None or np.any(b <= 0):
            continue
        g = gap_nodes[:, n]
        weighted_ok = float(b @ g) <= tolerance
        per_type_ok = bool(np.all(g <= tolerance))
        if per_type_ok and not weighted_ok:
            agree = False
        if weighted_ok and np.any(g > tolerance / b.min()):
            agree = False

    resid = occupation_residuals(problem, occ)
    vrec = defender_value_recursion(problem, 0, problem.prior, node_pol, lam)
    report = VerificationReport(b_err, b_node, s_err, s_node, gains, ugaps, agree, resid,
                                abs(vrec - sol.value), tolerance)
    sol.report = report
    return report
