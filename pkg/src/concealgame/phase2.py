"""Phase II: discounted MDPs with and without the same-action-distribution constraint.

A SAD policy is stored as one action distribution per superstate (``rows``,
shape ``(n_superstates, 4)``); the sink always plays uniformly.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .env import (N_ACTIONS, Representation, Scenario, TransitionKernel, build_transition,
                  reachable_states, superstate_array)
from .solvers import (FactoredSystem, LinearProgram, MultiStartConfig, SimplexProduct,
                      SolverError, multistart_maximize, solve_lp)

log = logging.getLogger(__name__)

MU_EPSILON = 1e-5


@dataclass
class PolicyTable:
    rows: np.ndarray
    superstate: np.ndarray  # per kernel state, sink -> len(rows)

    def state_policy(self) -> np.ndarray:
        ext = np.vstack([self.rows, np.full((1, N_ACTIONS), 1.0 / N_ACTIONS)])
        return ext[self.superstate]

    @classmethod
    def for_kernel(cls, rows: np.ndarray, rep: Representation,
                   kernel: TransitionKernel) -> "PolicyTable":
        return cls(np.asarray(rows, dtype=float), superstate_array(rep, kernel))


@dataclass
class OccupancyVector:
    d: np.ndarray
    mu: np.ndarray

    def flow_residual(self, kernel: TransitionKernel, policy: np.ndarray, beta: float) -> float:
        P = np.einsum("sa,sat->st", policy, kernel.probs)
        return float(np.max(np.abs(self.d - self.mu - beta * P.T @ self.d)))


@dataclass
class PolicyEvaluation:
    occupancy: OccupancyVector
    value: float
    V: np.ndarray
    Q: np.ndarray


def _as_state_policy(policy) -> np.ndarray:
    return policy.state_policy() if isinstance(policy, PolicyTable) else np.asarray(policy, float)


def evaluate_policy_full(kernel: TransitionKernel, policy, mu: np.ndarray,
                         beta: float) -> PolicyEvaluation:
    pi = _as_state_policy(policy)
    n = kernel.n_states
    P = np.einsum("sa,sat->st", pi, kernel.probs)
    r_pi = np.einsum("sa,sa->s", pi, kernel.rewards)
    system = FactoredSystem(np.eye(n) - beta * P)
    V = system.solve(r_pi)
    d = system.solve_transposed(np.asarray(mu, dtype=float))
    Q = kernel.rewards + beta * kernel.probs @ V
    return PolicyEvaluation(OccupancyVector(d, np.asarray(mu, float)), float(d @ r_pi), V, Q)


def evaluate_policy(kernel: TransitionKernel, policy, mu: np.ndarray,
                    beta: float) -> tuple[OccupancyVector, float]:
    ev = evaluate_policy_full(kernel, policy, mu, beta)
    return ev.occupancy, ev.value


def value_iteration(kernel: TransitionKernel, beta: float, tol: float = 1e-12,
                    max_iter: int = 100_000) -> np.ndarray:
    V = np.zeros(kernel.n_states)
    for _ in range(max_iter):
        V_new = np.max(kernel.rewards + beta * kernel.probs @ V, axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new
        V = V_new
    raise SolverError("value iteration did not converge")


@dataclass
class StateActionOccupancy:
    nu: np.ndarray  # (n_states, 4)

    @property
    def d(self) -> np.ndarray:
        return self.nu.sum(axis=1)


def unconstrained_lp(kernel: TransitionKernel, mu: np.ndarray, beta: float) -> LinearProgram:
    n = kernel.n_states
    # Row s: sum_a nu(s,a) - beta sum_{s',a'} f(s|s',a') nu(s',a') = mu(s).
    out = sp.kron(sp.eye(n), np.ones((1, N_ACTIONS)), format="csr")
    inflow = sp.csr_matrix(kernel.probs.reshape(n * N_ACTIONS, n).T)
    A = (out - beta * inflow).tocsr()
    return LinearProgram(kernel.rewards.ravel(), A_eq=A, b_eq=np.asarray(mu, float))


def solve_unconstrained_mdp(kernel: TransitionKernel, mu: np.ndarray,
                            beta: float) -> tuple[StateActionOccupancy, float]:
    res = solve_lp(unconstrained_lp(kernel, mu, beta))
    if res.status != "optimal":
        raise SolverError(f"occupancy LP {res.status}: {res.message}")
    nu = np.maximum(res.x.reshape(kernel.n_states, N_ACTIONS), 0.0)
    return StateActionOccupancy(nu), res.value


def lp_state_values(kernel: TransitionKernel, beta: float) -> np.ndarray:
    """Optimal value of every state, read off the duals of one LP with full-support mu."""
    mu = np.full(kernel.n_states, 1.0 / kernel.n_states)
    res = solve_lp(unconstrained_lp(kernel, mu, beta))
    if res.status != "optimal":
        raise SolverError(f"occupancy LP {res.status}")
    return res.eq_duals


def policy_from_occupancy(nu: StateActionOccupancy | np.ndarray, floor: float = 1e-12) -> np.ndarray:
    nu = nu.nu if isinstance(nu, StateActionOccupancy) else np.asarray(nu, float)
    d = nu.sum(axis=1, keepdims=True)
    pi = np.full_like(nu, 1.0 / nu.shape[1])
    ok = d[:, 0] > floor
    pi[ok] = nu[ok] / d[ok]
    return pi


def regularized_start(kernel: TransitionKernel, s: int, eps: float = MU_EPSILON) -> np.ndarray:
    mu = np.full(kernel.n_states, eps)
    mu[s] = 1.0
    return mu / mu.sum()


class SadObjective:
    """Value of a SAD policy and its per-superstate ascent direction.

    The direction for superstate ``g`` is ``sum_{s in g} d(s) Q(s, .)`` divided by
    the superstate's occupancy, i.e. an occupancy-weighted mean of Q.
    """

    def __init__(self, kernel: TransitionKernel, rep: Representation, mu: np.ndarray,
                 beta: float):
        self.kernel = kernel
        self.rep = rep
        self.mu = np.asarray(mu, float)
        self.beta = beta
        self.ss = superstate_array(rep, kernel)
        self.n_groups = len(rep)
        self.domain = SimplexProduct.uniform(self.n_groups, N_ACTIONS)
        self.evaluations = 0

    def table(self, x: np.ndarray) -> PolicyTable:
        return PolicyTable(x.reshape(self.n_groups, N_ACTIONS), self.ss)

    def evaluate(self, x: np.ndarray) -> PolicyEvaluation:
        self.evaluations += 1
        return evaluate_policy_full(self.kernel, self.table(x), self.mu, self.beta)

    def gradient(self, ev: PolicyEvaluation) -> np.ndarray:
        G = ev.occupancy.d[:, None] * ev.Q
        grad = np.zeros((self.n_groups + 1, N_ACTIONS))
        np.add.at(grad, self.ss, G)
        return grad[:-1]

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        ev = self.evaluate(x)
        grad = self.gradient(ev)
        mass = np.bincount(self.ss, weights=ev.occupancy.d, minlength=self.n_groups + 1)[:-1]
        return ev.value, (grad / np.maximum(mass, 1e-300)[:, None]).ravel()


def sad_seed_from_lp(kernel: TransitionKernel, rep: Representation, mu: np.ndarray,
                     beta: float) -> np.ndarray:
    """Occupancy-weighted average of the unconstrained optimal policy per superstate."""
    occ, _ = solve_unconstrained_mdp(kernel, mu, beta)
    ss = superstate_array(rep, kernel)
    rows = np.zeros((len(rep) + 1, N_ACTIONS))
    np.add.at(rows, ss, occ.nu)
    rows = rows[:-1]
    tot = rows.sum(axis=1, keepdims=True)
    out = np.full_like(rows, 1.0 / N_ACTIONS)
    ok = tot[:, 0] > 1e-12
    out[ok] = rows[ok] / tot[ok]
    return out.ravel()


@dataclass
class SadSolution:
    policy: PolicyTable
    value: float
    state_values: np.ndarray
    traces: list = field(default_factory=list)


def solve_sad_mdp(kernel: TransitionKernel, rep: Representation, mu: np.ndarray, beta: float,
                  config: MultiStartConfig | None = None, lp_seed: bool = True) -> SadSolution:
    config = config or MultiStartConfig()
    obj = SadObjective(kernel, rep, mu, beta)
    seeds = [sad_seed_from_lp(kernel, rep, mu, beta)] if lp_seed else []
    res = multistart_maximize(obj, obj.domain, config, seeds=seeds)
    table = obj.table(res.point)
    ev = obj.evaluate(res.point)
    return SadSolution(table, ev.value, ev.V, res.traces)


def _action_relevant(kernel: TransitionKernel, ss: np.ndarray, n_groups: int) -> list[int]:
    relevant = []
    for g in range(n_groups):
        members = np.flatnonzero(ss == g)
        succ = kernel.successor[members]
        rew = kernel.rewards[members]
        if np.any(succ != succ[:, :1]) or np.any(rew != rew[:, :1]):
            relevant.append(g)
    return relevant


def simplex_grid(k: int, step: float) -> np.ndarray:
    m = int(round(1.0 / step))
    if abs(m * step - 1.0) > 1e-9:
        raise ValueError("grid_step must divide 1")
    pts = [c for c in itertools.product(range(m + 1), repeat=k - 1) if sum(c) <= m]
    arr = np.array([list(c) + [m - sum(c)] for c in pts], dtype=float)
    return arr / m


def brute_force_sad_oracle(kernel: TransitionKernel, rep: Representation, mu: np.ndarray,
                           beta: float, grid_step: float = 0.05, max_points: int = 10**7,
                           chunk: int = 20000) -> float:
    """Max value over a simplex grid per action-relevant superstate, plus every vertex.

    Superstates whose members all share successor and reward under every action
    cannot affect the value and stay uniform.
    """
    ss = superstate_array(rep, kernel)
    n_groups = len(rep)
    rel = _action_relevant(kernel, ss, n_groups)
    grid = simplex_grid(N_ACTIONS, grid_step)
    total = len(grid) ** len(rel)
    if total > max_points:
        raise ValueError(f"oracle grid has {total} points, above the guard {max_points}")
    n = kernel.n_states
    mu = np.asarray(mu, float)
    base = np.full((n_groups + 1, N_ACTIONS), 1.0 / N_ACTIONS)
    best = -math.inf
    if not rel:
        return evaluate_policy(kernel, PolicyTable(base[:-1], ss), mu, beta)[1]
    idx = np.indices([len(grid)] * len(rel)).reshape(len(rel), -1).T
    eye = np.eye(n)
    states = np.arange(n)
    for lo in range(0, len(idx), chunk):
        sel = idx[lo:lo + chunk]
        rows = np.broadcast_to(base, (len(sel),) + base.shape).copy()
        for j, g in enumerate(rel):
            rows[:, g] = grid[sel[:, j]]
        pi = rows[:, ss]  # (B, n, 4)
        P = np.zeros((len(sel), n, n))
        for a in range(N_ACTIONS):
            P[:, states, kernel.successor[:, a]] += pi[:, :, a]
        r = np.einsum("bsa,sa->bs", pi, kernel.rewards)
        V = np.linalg.solve(eye[None] - beta * P, r[..., None])[..., 0]
        best = max(best, float(np.max(V @ mu)))
    return best


# --- value tables --------------------------------------------------------------

@dataclass
class ValueTable:
    """``values[theta, omega, s]`` (NaN where not computed) and the matching policies."""

    values: np.ndarray
    policies: dict  # (theta, omega, s) -> superstate rows
    states: list[int]
    cells: tuple
    seed: int = 0

    @property
    def n_types(self) -> int:
        return self.values.shape[0]

    @property
    def n_barriers(self) -> int:
        return self.values.shape[1]

    def vector(self, theta: int, s: int) -> np.ndarray:
        v = self.values[theta, :, s]
        if np.any(np.isnan(v)):
            raise KeyError(f"no value table entry for type {theta} at state {s}")
        return v


def _cell_job(args):
    scenario, theta, omega, s, config = args
    kernel = build_transition(scenario, omega)
    rep = scenario.representations[theta]
    sol = solve_sad_mdp(kernel, rep, regularized_start(kernel, s), scenario.discount, config)
    return theta, omega, s, float(sol.state_values[s]), sol.policy.rows


def cell_seed(seed: int, theta: int, omega: int, s: int) -> int:
    return int(np.random.SeedSequence([seed, theta, omega, s]).generate_state(1)[0])


def build_value_tables(scenario: Scenario, restrict_to: list[int] | None = None,
                       config: MultiStartConfig | None = None, jobs: int = 1,
                       all_states: bool = False) -> ValueTable:
    """Phase-II value and policy for every type, barrier and candidate start state.

    Defaults to the states reachable from the start within the horizon. The stored
    value is the policy's value from ``s`` itself; the optimization uses the
    start distribution concentrated on ``s`` with a small mass elsewhere.
    """
    config = config or MultiStartConfig()
    free = build_transition(scenario, None)
    start = free.index(scenario.grid.start)
    if restrict_to is not None:
        states = sorted(set(int(s) for s in restrict_to))
    elif all_states:
        states = list(range(free.n_states))
    else:
        states = reachable_states(free, start, scenario.horizon)
    n_t, n_w = scenario.n_types, scenario.n_barriers
    values = np.full((n_t, n_w, free.n_states), np.nan)
    policies = {}
    sink = free.sink
    jobs_list = []
    for theta in range(n_t):
        for omega in range(n_w):
            if sink in states:
                values[theta, omega, sink] = 0.0
                policies[theta, omega, sink] = np.full(
                    (len(scenario.representations[theta]), N_ACTIONS), 1.0 / N_ACTIONS)
            for s in states:
                if s == sink:
                    continue
                cfg = MultiStartConfig(**{**config.__dict__,
                                          "seed": cell_seed(config.seed, theta, omega, s)})
                jobs_list.append((scenario, theta, omega, s, cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell_job, jobs_list, chunksize=4))
    else:
        results = [_cell_job(j) for j in jobs_list]
    for theta, omega, s, v, rows in results:
        values[theta, omega, s] = v
        policies[theta, omega, s] = rows
    return ValueTable(values, policies, states, free.cells, config.seed)
