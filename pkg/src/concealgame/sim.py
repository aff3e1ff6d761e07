"""Monte-Carlo rollouts of the two-phase game under computed strategies."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import N_ACTIONS, Scenario, build_transition, superstate_array
from .phase1.equilibrium import EquilibriumSolution, defender_best_response, extract_attacker_strategy
from .phase2 import ValueTable

STEP_CAP = 200


@dataclass
class Rollout:
    theta: int
    phase1_states: list[int]
    phase1_actions: list[int]
    omega: int
    phase2_states: list[int]
    phase2_actions: list[int]
    payoff: float
    seed: int
    truncated: bool = False
    residual_bound: float = 0.0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _sample(rng: np.random.Generator, p: np.ndarray) -> int:
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))


def phase2_policy(scenario: Scenario, values: ValueTable, theta: int, omega: int, s: int,
                  kernel) -> tuple[np.ndarray, bool]:
    """State-level Phase-II policy for a start state; uniform (flagged) when the table lacks it."""
    rows = values.policies.get((theta, omega, s))
    if rows is None:
        return np.full((kernel.n_states, N_ACTIONS), 1.0 / N_ACTIONS), True
    rep = scenario.representations[theta]
    ext = np.vstack([np.asarray(rows, float), np.full((1, N_ACTIONS), 1.0 / N_ACTIONS)])
    return ext[superstate_array(rep, kernel)], False


def trajectory_payoff(scenario: Scenario, r: Rollout) -> float:
    """Discounted payoff recomputed from a logged trajectory."""
    beta = scenario.discount
    free = build_transition(scenario, None)
    total = 0.0
    for t, (s, a) in enumerate(zip(r.phase1_states, r.phase1_actions)):
        total += beta ** t * free.rewards[s, a]
    kern = build_transition(scenario, r.omega)
    scale = beta ** len(r.phase1_actions) if scenario.terminal_discount else 1.0
    tail = 0.0
    for t, (s, a) in enumerate(zip(r.phase2_states, r.phase2_actions)):
        tail += beta ** t * kern.rewards[s, a]
    return float(total + scale * tail)


def rollout(scenario: Scenario, sol: EquilibriumSolution, values: ValueTable, seed: int,
            step_cap: int = STEP_CAP) -> Rollout:
    rng = np.random.default_rng(seed)
    problem = sol.problem
    tree = problem.tree
    flags = []
    theta = _sample(rng, problem.prior)
    node_pol = extract_attacker_strategy(sol.occupation)
    node, states, actions = 0, [], []
    for _ in range(problem.T):
        s = int(tree.node_state[node])
        a = _sample(rng, node_pol[theta, node])
        states.append(s)
        actions.append(a)
        node = tree.child(node, a)
    sT = int(tree.node_state[node])
    mix = sol.sigma.get(node)
    if mix is None:
        flags.append("leaf without defender mixture")
        mix = np.zeros(problem.n_barriers)
        mix[defender_best_response(problem.prior, values, sT)[0][0]] = 1.0
    omega = _sample(rng, np.asarray(mix, float))
    kern = build_transition(scenario, omega)
    pol, missing = phase2_policy(scenario, values, problem.types[theta], omega, sT, kern)
    if missing:
        flags.append("phase-II policy row missing, uniform used")
    s, s2, a2 = sT, [], []
    truncated = True
    for _ in range(step_cap):
        if s == kern.sink:
            truncated = False
            break
        a = _sample(rng, pol[s])
        s2.append(s)
        a2.append(a)
        s = int(kern.successor[s, a])
    else:
        truncated = s != kern.sink
    r = Rollout(problem.types[theta], states, actions, omega, s2, a2, 0.0, seed, truncated)
    if truncated:
        scale = problem.beta ** problem.T if scenario.terminal_discount else 1.0
        r.residual_bound = float(scale * problem.beta ** step_cap
                                 * max(abs(scenario.reward.step) / (1 - problem.beta),
                                       abs(scenario.reward.goal)))
    r.flags = flags
    r.payoff = trajectory_payoff(scenario, r)
    return r


def monte_carlo_value(scenario: Scenario, sol: EquilibriumSolution, values: ValueTable, n: int,
                      seed: int = 0, step_cap: int = STEP_CAP) -> tuple[float, float | None]:
    """Vectorized rollouts: sample mean and standard error (None for a single sample)."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    problem = sol.problem
    tree = problem.tree
    beta = problem.beta
    node_pol = extract_attacker_strategy(sol.occupation)
    R = problem.kernel.rewards
    theta = rng.choice(problem.n_types, size=n, p=problem.prior)
    j = np.zeros(n, dtype=np.int64)
    pay = np.zeros(n)
    for t in range(problem.T):
        node = tree.offsets[t] + j
        cum = np.cumsum(node_pol[theta, node], axis=1)
        a = np.minimum((rng.random(n)[:, None] >= cum).sum(axis=1), N_ACTIONS - 1)
        pay += beta ** t * R[tree.node_state[node], a]
        j = j * N_ACTIONS + a
    leaf_nodes = tree.offsets[-2] + j
    sigma = np.zeros((tree.n_leaves, problem.n_barriers))
    for nd, mix in sol.sigma.items():
        sigma[nd - tree.offsets[-2]] = mix
    cum = np.cumsum(sigma[j], axis=1)
    omega = np.minimum((rng.random(n)[:, None] >= cum).sum(axis=1), problem.n_barriers - 1)
    sT = tree.node_state[leaf_nodes]
    scale = beta ** problem.T if scenario.terminal_discount else 1.0
    keys = np.stack([theta, omega, sT], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    kernels = {}
    for g, (k, w, s0) in enumerate(uniq):
        idx = np.flatnonzero(inv == g)
        kern = kernels.setdefault(int(w), build_transition(scenario, int(w)))
        pol, _ = phase2_policy(scenario, values, problem.types[k], int(w), int(s0), kern)
        cum = np.cumsum(pol, axis=1)
        s = np.full(idx.size, int(s0))
        tail = np.zeros(idx.size)
        for t in range(step_cap):
            alive = s != kern.sink
            if not alive.any():
                break
            a = np.minimum((rng.random(idx.size)[:, None] >= cum[s]).sum(axis=1), N_ACTIONS - 1)
            tail += np.where(alive, beta ** t * kern.rewards[s, a], 0.0)
            s = np.where(alive, kern.successor[s, a], s)
        pay[idx] += scale * tail
    mean = float(pay.mean())
    se = float(pay.std(ddof=1) / math.sqrt(n)) if n > 1 else None
    return mean, se


@dataclass
class ComparisonReport:
    analytic_value: float
    baseline: float
    empirical_mean: float | None
    empirical_stderr: float | None
    phase1_constant: float
    total_improvement: float | None
    phase2_improvement: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        def pct(v):
            return "n/a" if v is None else f"{100 * v:.1f}%"
        emp = ("n/a" if self.empirical_mean is None else
               f"{self.empirical_mean:.4f}" + ("" if self.empirical_stderr is None
                                                 else f" +/- {self.empirical_stderr:.4f}"))
        rows = [("concealed value", f"{self.analytic_value:.4f}"),
                ("full-information baseline", f"{self.baseline:.4f}"),
                ("empirical mean", emp),
                ("phase-I constant", f"{self.phase1_constant:.4f}"),
                ("total improvement", pct(self.total_improvement)),
                ("phase-II-only improvement", pct(self.phase2_improvement))]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows)


def _relative(a: float, b: float) -> float | None:
    return None if abs(b) < 1e-9 else (a - b) / abs(b)


def comparison_report(value: float, baseline: float, empirical=None,
                      phase1_constant: float = 0.0) -> ComparisonReport:
    mean, se = empirical if empirical is not None else (None, None)
    return ComparisonReport(value, baseline, mean, se, phase1_constant,
                            _relative(value, baseline),
                            _relative(value - phase1_constant, baseline - phase1_constant))
