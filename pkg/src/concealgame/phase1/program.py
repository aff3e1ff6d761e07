"""Occupation measures on the Phase-I tree and the programs built on them.

Attacker strategies are stationary per-superstate action distributions, one
block of rows per type. For a joint point ``x`` the induced history-action
occupation is

    mass(h_0) = prior,  z(h, a) = mass(h) * x(a | superstate(s_h)),
    mass(child(h, a)) = beta * z(h, a),

so the SAD proportionality constraints hold by construction. The objective is
the sum of stage rewards plus, at each leaf, the Defender's minimum over
barriers of the mass-weighted Phase-II values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..env import N_ACTIONS, Scenario, build_transition, superstate_array
from ..phase2 import ValueTable
from ..solvers import LinearProgram, SimplexProduct, SolverError, solve_lp
from .tree import GameTree, enumerate_tree

TIE_TOL = 1e-9
MASS_FLOOR = 1e-12


class MissingValueError(KeyError):
    pass


class Phase1Problem:
    """Tree, per-type superstate maps and leaf value vectors for a Phase-I game.

    ``types`` selects a subset of the scenario's types (used by the
    full-information baseline); ``prior`` overrides the matching prior masses.
    """

    def __init__(self, scenario: Scenario, values: ValueTable, types=None, prior=None,
                 tree: GameTree | None = None, horizon: int | None = None):
        self.scenario = scenario
        self.values = values
        self.types = list(range(scenario.n_types)) if types is None else [int(t) for t in types]
        self.prior = np.asarray(prior if prior is not None
                                else [scenario.prior[t] for t in self.types], dtype=float)
        self.kernel = build_transition(scenario, None)
        self.tree = tree if tree is not None else enumerate_tree(scenario, self.kernel, horizon)
        self.beta = scenario.discount
        self.T = self.tree.horizon
        self.n_types = len(self.types)
        self.n_barriers = scenario.n_barriers
        self.reps = [scenario.representations[t] for t in self.types]
        self.n_groups = [len(r) for r in self.reps]
        self.state_groups = [superstate_array(r, self.kernel) for r in self.reps]
        self.var_offsets = np.concatenate([[0], np.cumsum([4 * g for g in self.n_groups])])
        self.domain = SimplexProduct.uniform(sum(self.n_groups), N_ACTIONS)
        levels = self.tree.level_states
        self.level_groups = [[sg[levels[t]] for t in range(self.T + 1)] for sg in self.state_groups]
        self.level_rewards = [self.kernel.rewards[levels[t]] for t in range(self.T)]
        leaf_states = levels[self.T]
        V = values.values[self.types][:, :, leaf_states]
        if np.any(np.isnan(V)):
            missing = sorted({int(s) for s in leaf_states[np.isnan(V).any(axis=(0, 1))]})
            raise MissingValueError(f"value table has no entry for leaf states {missing[:10]}")
        self.leaf_factor = 1.0 if scenario.terminal_discount else self.beta ** (-self.T)
        self.leaf_values_raw = V
        self.Vleaf = V * self.leaf_factor  # (types, barriers, leaves)

    # --- layout ---------------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return int(self.var_offsets[-1])

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        return [x[self.var_offsets[k]:self.var_offsets[k + 1]].reshape(-1, N_ACTIONS)
                for k in range(self.n_types)]

    def join(self, rows) -> np.ndarray:
        return np.concatenate([np.asarray(r, float).ravel() for r in rows])

    def _ext_rows(self, x: np.ndarray) -> list[np.ndarray]:
        uni = np.full((1, N_ACTIONS), 1.0 / N_ACTIONS)
        return [np.vstack([r, uni]) for r in self.split(x)]

    def state_policies(self, x: np.ndarray) -> np.ndarray:
        """Per-type state-level action distributions, shape (types, states, 4)."""
        return np.stack([r[sg] for r, sg in zip(self._ext_rows(x), self.state_groups)])

    # --- forward/backward -------------------------------------------------------
    def forward(self, x: np.ndarray):
        rows = self._ext_rows(x)
        masses = [self.prior[:, None].copy()]
        probs = []
        for t in range(self.T):
            X = np.stack([rows[k][self.level_groups[k][t]] for k in range(self.n_types)])
            probs.append(X)
            masses.append(self.beta * (masses[-1][:, :, None] * X).reshape(self.n_types, -1))
        return masses, probs

    def leaf_matrix(self, leaf_mass: np.ndarray) -> np.ndarray:
        """Mass-weighted value of each barrier at each leaf, shape (barriers, leaves)."""
        return np.einsum("kl,kwl->wl", leaf_mass, self.Vleaf)

    @staticmethod
    def tie_mask(L: np.ndarray, leaf_mass: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
        total = leaf_mass.sum(axis=0)
        gap = L - L.min(axis=0)
        zero = total <= MASS_FLOOR
        with np.errstate(divide="ignore", invalid="ignore"):
            tie = gap <= tol * np.where(zero, 1.0, total)
        tie[:, zero] = True
        return tie

    def stage_value(self, masses, probs) -> float:
        return float(sum(np.einsum("kj,kja,ja->", masses[t], probs[t], self.level_rewards[t])
                         for t in range(self.T)))

    def value(self, x: np.ndarray) -> float:
        masses, probs = self.forward(x)
        return self.stage_value(masses, probs) + float(self.leaf_matrix(masses[-1]).min(axis=0).sum())

    def leaf_adjoint(self, masses) -> np.ndarray:
        """Leaf supergradient, shape (types, leaves); ties go to the lowest-index barrier."""
        L = self.leaf_matrix(masses[-1])
        w = np.argmax(self.tie_mask(L, masses[-1]), axis=0)
        lam = self.Vleaf[:, w, np.arange(L.shape[1])]
        # A single type entering an unvisited leaf faces its own worst barrier.
        zero = masses[-1].sum(axis=0) <= MASS_FLOOR
        lam[:, zero] = self.Vleaf[:, :, zero].min(axis=1)
        return lam

    def backward(self, masses, probs, lam_leaf: np.ndarray):
        """Raw gradient, per-(type, superstate) visit mass and per-node values.

        ``lam_leaf[k, l]`` is the value per unit of type-k mass at leaf l.
        Returns per-level value arrays ``lam[t]`` of shape (types, N_t).
        """
        grad = np.zeros(self.n_vars)
        gmass = np.zeros(sum(self.n_groups))
        goff = np.concatenate([[0], np.cumsum(self.n_groups)])
        lam = lam_leaf
        lams = [None] * (self.T + 1)
        lams[self.T] = lam
        for t in reversed(range(self.T)):
            X = probs[t]
            q = self.level_rewards[t][None] + self.beta * lam.reshape(self.n_types, -1, N_ACTIONS)
            for k in range(self.n_types):
                ng = self.n_groups[k]
                gi = self.level_groups[k][t]
                w = masses[t][k][:, None] * q[k]
                flat = (gi[:, None] * N_ACTIONS + np.arange(N_ACTIONS)).ravel()
                acc = np.bincount(flat, weights=w.ravel(), minlength=(ng + 1) * N_ACTIONS)
                grad[self.var_offsets[k]:self.var_offsets[k + 1]] += acc[:ng * N_ACTIONS]
                gm = np.bincount(gi, weights=masses[t][k], minlength=ng + 1)
                gmass[goff[k]:goff[k + 1]] += gm[:ng]
            lam = np.einsum("kja,kja->kj", X, q)
            lams[t] = lam
        return grad, gmass, lams

    def gradient(self, x: np.ndarray) -> np.ndarray:
        masses, probs = self.forward(x)
        return self.backward(masses, probs, self.leaf_adjoint(masses))[0]

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        masses, probs = self.forward(x)
        L = self.leaf_matrix(masses[-1])
        value = self.stage_value(masses, probs) + float(L.min(axis=0).sum())
        grad, gmass, _ = self.backward(masses, probs, self.leaf_adjoint(masses))
        direction = grad.reshape(-1, N_ACTIONS) / np.maximum(gmass, 1e-300)[:, None]
        return value, direction.ravel()

    # --- sensitivities ------------------------------------------------------------
    def mass_jacobian(self, x: np.ndarray) -> list[sp.csr_matrix]:
        """d mass(node) / d x for each type, shape (n_nodes, n_vars)."""
        rows = self._ext_rows(x)
        out = []
        n_nodes = self.tree.n_nodes
        for k in range(self.n_types):
            ng = self.n_groups[k]
            r_idx, c_idx, vals = [], [], []
            for t in range(1, self.T + 1):
                j = np.arange(N_ACTIONS ** t)
                P = np.empty((j.size, t))
                VI = np.empty((j.size, t), dtype=np.int64)
                for tau in range(t):
                    anc = j // N_ACTIONS ** (t - tau)
                    a = (j // N_ACTIONS ** (t - tau - 1)) % N_ACTIONS
                    g = self.level_groups[k][tau][anc]
                    P[:, tau] = rows[k][g, a]
                    VI[:, tau] = np.where(g == ng, -1, self.var_offsets[k] + g * N_ACTIONS + a)
                pre = np.cumprod(np.hstack([np.ones((j.size, 1)), P]), axis=1)
                suf = np.cumprod(np.hstack([P, np.ones((j.size, 1))])[:, ::-1], axis=1)[:, ::-1]
                D = self.prior[k] * self.beta ** t * pre[:, :t] * suf[:, 1:]
                ok = (VI >= 0) & (D != 0)
                node = np.broadcast_to((self.tree.offsets[t] + j)[:, None], VI.shape)
                r_idx.append(node[ok])
                c_idx.append(VI[ok])
                vals.append(D[ok])
            if r_idx:
                J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))),
                                  shape=(n_nodes, self.n_vars))
            else:
                J = sp.csr_matrix((n_nodes, self.n_vars))
            J.sum_duplicates()
            out.append(J)
        return out

    def stage_gradient(self, x: np.ndarray) -> np.ndarray:
        masses, probs = self.forward(x)
        return self.backward(masses, probs, np.zeros_like(masses[-1]))[0]

    # --- local refinement -----------------------------------------------------------
    def polish(self, x: np.ndarray, max_iter: int = 80, radius: float = 0.1,
               min_radius: float = 1e-10) -> np.ndarray:
        """Sequential linear programming with a box trust region.

        Each step maximizes the linearized stage term plus the exact minimum over
        barriers of the linearized leaf masses, which lands iterates on the kinks
        where the Defender is indifferent.
        """
        x = self.domain.project(np.asarray(x, float))
        f = self.value(x)
        leaf0 = int(self.tree.offsets[-2])
        n = self.n_vars
        nb = sum(self.n_groups)
        B = sp.kron(sp.eye(nb), np.ones((1, N_ACTIONS)), format="csr")
        for _ in range(max_iter):
            if radius < min_radius:
                break
            masses, _ = self.forward(x)
            Js = [J[leaf0:] for J in self.mass_jacobian(x)]
            gs = self.stage_gradient(x)
            m_leaf = masses[-1]
            active = (m_leaf.sum(axis=0) > 0) | np.asarray(
                sum(abs(J).sum(axis=1) for J in Js) > 0).ravel()
            A_idx = np.flatnonzero(active)
            nA = A_idx.size
            L = self.leaf_matrix(m_leaf)[:, A_idx]
            blocks = []
            for w in range(self.n_barriers):
                lin = sum(sp.diags(self.Vleaf[k, w, A_idx]) @ Js[k][A_idx] for k in range(self.n_types))
                blocks.append(sp.hstack([-lin, sp.eye(nA)]))
            A_ub = sp.vstack(blocks).tocsr()
            b_ub = L.ravel()
            lo = np.concatenate([np.maximum(-x, -radius), np.full(nA, -np.inf)])
            hi = np.concatenate([np.minimum(1.0 - x, radius), np.full(nA, np.inf)])
            c = np.concatenate([gs, np.ones(nA)])
            lp = LinearProgram(c, A_eq=sp.hstack([B, sp.csr_matrix((nb, nA))]).tocsr(),
                               b_eq=np.zeros(nb), A_ub=A_ub, b_ub=b_ub, lower=lo, upper=hi)
            res = solve_lp(lp)
            if res.status != "optimal":
                radius *= 0.25
                continue
            dx = res.x[:n]
            pred = float(gs @ dx + res.x[n:].sum() - L.min(axis=0).sum())
            if pred <= 1e-14 * max(1.0, abs(f)):
                break
            y = self.domain.project(x + dx)
            fy = self.value(y)
            gain = fy - f
            if gain > 0:
                x, f = y, fy
                if gain > 0.75 * pred and np.max(np.abs(dx)) > 0.9 * radius:
                    radius = min(2 * radius, 1.0)
                elif gain < 0.25 * pred:
                    radius *= 0.5
            else:
                radius *= 0.25
        return x

    def snap_ties(self, x: np.ndarray, tol: float = 1e-6, iters: int = 8) -> np.ndarray:
        """Newton projection making near-indifferent leaves exactly indifferent."""
        x = np.asarray(x, float).copy()
        leaf0 = int(self.tree.offsets[-2])
        base = self.value(x)
        x0 = x.copy()
        for _ in range(iters):
            masses, _ = self.forward(x)
            m = masses[-1]
            L = self.leaf_matrix(m)
            total = m.sum(axis=0)
            pos = total > MASS_FLOOR
            near = self.tie_mask(L, m, tol) & pos[None]
            wmin = L.argmin(axis=0)
            pairs = [(l, w) for l in np.flatnonzero(pos) for w in np.flatnonzero(near[:, l])
                     if w != wmin[l]]
            if not pairs:
                return x
            F = np.array([L[w, l] - L[wmin[l], l] for l, w in pairs])
            if np.max(np.abs(F) / total[[l for l, _ in pairs]]) <= 1e-15:
                break
            Js = [J[leaf0:] for J in self.mass_jacobian(x)]
            rows = []
            for l, w in pairs:
                rows.append(sum((self.Vleaf[k, w, l] - self.Vleaf[k, wmin[l], l]) * Js[k][l]
                                for k in range(self.n_types)))
            JF = sp.vstack(rows).toarray()
            S = np.flatnonzero(x > 1e-12)
            blk = S // N_ACTIONS
            ub = np.unique(blk)
            Bm = (blk[None, :] == ub[:, None]).astype(float)
            A = np.vstack([JF[:, S], Bm])
            rhs = np.concatenate([-F, np.zeros(len(ub))])
            dx = np.linalg.lstsq(A, rhs, rcond=None)[0]
            y = x.copy()
            y[S] += dx
            if np.any(y < 0):
                return x0
            x = y
        if self.value(x) < base - 1e-9 * max(1.0, abs(base)):
            return x0
        return x


# --- occupation trees ------------------------------------------------------------

@dataclass
class OccupationTree:
    """History-action occupations per type.

    ``mass[k, node]`` is the node mass, ``z[k, h, a]`` the occupation of internal
    node ``h``, ``stage[h]`` its stage reward and ``leaf[l]`` the leaf reward.
    """

    tree: GameTree
    mass: np.ndarray
    z: np.ndarray
    stage: np.ndarray
    leaf: np.ndarray
    prior: np.ndarray
    beta: float

    @property
    def n_types(self) -> int:
        return self.mass.shape[0]

    def leaf_mass(self) -> np.ndarray:
        return self.mass[:, self.tree.offsets[-2]:]

    def beliefs(self, node: int) -> np.ndarray | None:
        tot = self.mass[:, node].sum()
        return None if tot <= MASS_FLOOR else self.mass[:, node] / tot


def induced_occupation(problem: Phase1Problem, x: np.ndarray) -> OccupationTree:
    masses, probs = problem.forward(x)
    mass = np.concatenate(masses, axis=1)
    n_int = problem.tree.n_internal
    if problem.T:
        z = np.concatenate([m[:, :, None] * X for m, X in zip(masses[:-1], probs)], axis=1)
        R = np.concatenate(problem.level_rewards)
        stage = np.einsum("kha,ha->h", z, R)
    else:
        z = np.zeros((problem.n_types, 0, N_ACTIONS))
        stage = np.zeros(0)
    leaf = problem.leaf_matrix(masses[-1]).min(axis=0)
    # Zero-mass nodes carry exactly zero reward.
    tot = mass[:, :n_int].sum(axis=0)
    stage = np.where(tot > 0, stage, 0.0)
    return OccupationTree(problem.tree, mass, z, stage, leaf, problem.prior.copy(), problem.beta)


def leaf_value(z_leaf: np.ndarray, V_leaf: np.ndarray, tol: float = TIE_TOL):
    """Defender's minimum for one leaf and every barrier within ``tol`` of it.

    ``z_leaf[k]`` is type-k leaf mass, ``V_leaf[k, w]`` the Phase-II values.
    """
    z_leaf = np.asarray(z_leaf, float)
    vals = z_leaf @ np.asarray(V_leaf, float)
    total = z_leaf.sum()
    best = float(vals.min())
    if total <= MASS_FLOOR:
        return best if total > 0 else 0.0, list(range(vals.size))
    tie = [w for w in range(vals.size) if vals[w] - best <= tol * total]
    return best, tie


def evaluate_objective(occ: OccupationTree) -> float:
    return float(occ.stage.sum() + occ.leaf.sum())


def occupation_residuals(problem: Phase1Problem, occ: OccupationTree) -> dict:
    """Residuals of the root, flow, SAD proportionality and stage-reward equalities."""
    tree = problem.tree
    n_int = tree.n_internal
    zbar = occ.z.sum(axis=2)
    out = {"root": float(np.max(np.abs(zbar[:, 0] - occ.prior))) if n_int else 0.0}
    flow = 0.0
    for t in range(1, problem.T + 1):
        j = np.arange(N_ACTIONS ** t)
        par = tree.offsets[t - 1] + j // N_ACTIONS
        a = j % N_ACTIONS
        child_mass = occ.mass[:, tree.offsets[t] + j]
        flow = max(flow, float(np.max(np.abs(child_mass - problem.beta * occ.z[:, par, a]))))
        if t < problem.T:
            flow = max(flow, float(np.max(np.abs(zbar[:, tree.offsets[t] + j] - child_mass))))
    out["flow"] = flow
    sad = 0.0
    for k in range(problem.n_types):
        groups = problem.state_groups[k][tree.node_state[:n_int]]
        for g in np.unique(groups):
            if g == problem.n_groups[k]:
                continue
            idx = np.flatnonzero(groups == g)
            ref = idx[np.argmax(zbar[k, idx])]
            lhs = zbar[k, ref] * occ.z[k, idx]
            rhs = zbar[k, idx][:, None] * occ.z[k, ref][None]
            sad = max(sad, float(np.max(np.abs(lhs - rhs), initial=0.0)))
    out["sad"] = sad
    R = problem.kernel.rewards[tree.node_state[:n_int]]
    stage = np.einsum("kha,ha->h", occ.z, R)
    out["stage"] = float(np.max(np.abs(stage - occ.stage), initial=0.0))
    return out


# --- linear program without the SAD constraint ------------------------------------------

def solve_phase1_lp(problem: Phase1Problem) -> tuple[OccupationTree, float]:
    """Exact optimum of the occupation LP over history-dependent strategies."""
    tree = problem.tree
    K, T, beta = problem.n_types, problem.T, problem.beta
    nW = problem.n_barriers
    if T == 0:
        m = problem.prior[:, None]
        leaf = problem.leaf_matrix(m).min(axis=0)
        occ = OccupationTree(tree, m.copy(), np.zeros((K, 0, N_ACTIONS)), np.zeros(0), leaf,
                             problem.prior.copy(), beta)
        return occ, float(leaf.sum())
    n_int = tree.n_internal
    L = tree.n_leaves
    nz = K * n_int * N_ACTIONS

    def zi(k, h, a):
        return (k * n_int + h) * N_ACTIONS + a

    R = problem.kernel.rewards[tree.node_state[:n_int]]
    c = np.concatenate([np.tile(R.ravel(), K), np.ones(L)])
    rows, cols, vals = [], [], []
    b_eq = np.zeros(K * n_int)
    h_all = np.arange(n_int)
    for k in range(K):
        for a in range(N_ACTIONS):
            rows.append(k * n_int + h_all)
            cols.append(zi(k, h_all, a))
            vals.append(np.ones(n_int))
        b_eq[k * n_int] = problem.prior[k]
        h = np.arange(1, n_int)
        depth = tree.node_depth[h]
        j = h - tree.offsets[depth]
        par = tree.offsets[depth - 1] + j // N_ACTIONS
        rows.append(k * n_int + h)
        cols.append(zi(k, par, j % N_ACTIONS))
        vals.append(np.full(h.size, -beta))
    A_eq = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(K * n_int, nz + L))
    rows, cols, vals = [], [], []
    jl = np.arange(L)
    par = tree.offsets[T - 1] + jl // N_ACTIONS
    act = jl % N_ACTIONS
    for w in range(nW):
        r = w * L + jl
        rows.append(r)
        cols.append(nz + jl)
        vals.append(np.ones(L))
        for k in range(K):
            rows.append(r)
            cols.append(zi(k, par, act))
            vals.append(-beta * problem.Vleaf[k, w])
    A_ub = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(nW * L, nz + L))
    free = np.zeros(nz + L, dtype=bool)
    free[nz:] = True
    res = solve_lp(LinearProgram(c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=np.zeros(nW * L),
                                 free=free))
    if res.status != "optimal":
        raise SolverError(f"Phase-I LP {res.status}: {res.message}")
    z = np.maximum(res.x[:nz].reshape(K, n_int, N_ACTIONS), 0.0)
    mass = np.zeros((K, tree.n_nodes))
    mass[:, :n_int] = z.sum(axis=2)
    mass[:, n_int:] = beta * z[:, par, act]
    stage = np.einsum("kha,ha->h", z, R)
    leaf = problem.leaf_matrix(mass[:, n_int:]).min(axis=0)
    occ = OccupationTree(tree, mass, z, stage, leaf, problem.prior.copy(), beta)
    return occ, res.value
