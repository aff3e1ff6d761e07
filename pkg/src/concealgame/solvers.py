"""Numerical kernels shared by both phases.

``solve_lp`` wraps the HiGHS solver from SciPy and reports primal residuals and
the duality gap recomputed from the returned multipliers.
``multistart_maximize`` runs projected ascent over a product of simplices from
several starting points and keeps the best result.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


# --- linear programming ----------------------------------------------------

@dataclass
class LinearProgram:
    """maximize c @ x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lb <= x <= ub."""

    c: np.ndarray
    A_eq: np.ndarray | sp.spmatrix | None = None
    b_eq: np.ndarray | None = None
    A_ub: np.ndarray | sp.spmatrix | None = None
    b_ub: np.ndarray | None = None
    lower: np.ndarray | float = 0.0
    upper: np.ndarray | float | None = None
    free: np.ndarray | None = None  # boolean mask of unbounded variables

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        for A, b, name in ((self.A_eq, self.b_eq, "eq"), (self.A_ub, self.b_ub, "ub")):
            if (A is None) != (b is None):
                raise ValueError(f"A_{name} and b_{name} must be given together")
            if A is not None and (A.shape[1] != n or A.shape[0] != np.size(b)):
                raise ValueError(f"A_{name} has shape {A.shape}, expected (len(b_{name}), {n})")
        if not np.all(np.isfinite(self.c)):
            raise ValueError("objective has non-finite coefficients")

    @property
    def n(self) -> int:
        return self.c.size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.n,)).copy()
        hi = (np.full(self.n, np.inf) if self.upper is None
              else np.broadcast_to(np.asarray(self.upper, dtype=float), (self.n,)).copy())
        if self.free is not None:
            lo[np.asarray(self.free, dtype=bool)] = -np.inf
        return lo, hi


@dataclass
class LPResult:
    x: np.ndarray | None
    value: float
    status: str  # optimal | infeasible | unbounded | stalled
    residual: float = math.nan
    gap: float = math.nan
    eq_duals: np.ndarray | None = None
    ub_duals: np.ndarray | None = None
    message: str = ""


_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def solve_lp(lp: LinearProgram, method: str = "highs") -> LPResult:
    lo, hi = lp.bounds()
    res = scipy.optimize.linprog(
        -lp.c, A_ub=lp.A_ub, b_ub=lp.b_ub, A_eq=lp.A_eq, b_eq=lp.b_eq,
        bounds=np.column_stack([lo, hi]), method=method, options=dict(_HIGHS_OPTIONS))
    if res.status == 2:
        return LPResult(None, math.nan, "infeasible", message=res.message)
    if res.status == 3:
        return LPResult(None, math.nan, "unbounded", message=res.message)
    if res.status != 0 or res.x is None:
        return LPResult(res.x, math.nan, "stalled", message=res.message)
    x = res.x
    resid = 0.0
    if lp.A_eq is not None:
        resid = max(resid, float(np.max(np.abs(lp.A_eq @ x - lp.b_eq), initial=0.0)))
    if lp.A_ub is not None:
        resid = max(resid, float(np.max(lp.A_ub @ x - lp.b_ub, initial=0.0)))
    resid = max(resid, float(np.max(lo - x, initial=0.0)), float(np.max(x - hi, initial=0.0)))
    # linprog minimizes -c; its multipliers certify the minimization problem.
    dual = 0.0
    eq_d = ub_d = None
    if lp.A_eq is not None:
        eq_d = -np.asarray(res.eqlin.marginals)
        dual += float(np.dot(lp.b_eq, res.eqlin.marginals))
    if lp.A_ub is not None:
        ub_d = -np.asarray(res.ineqlin.marginals)
        dual += float(np.dot(lp.b_ub, res.ineqlin.marginals))
    lm, um = np.asarray(res.lower.marginals), np.asarray(res.upper.marginals)
    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    dual += float(np.dot(lo[fin_lo], lm[fin_lo])) + float(np.dot(hi[fin_hi], um[fin_hi]))
    value = float(lp.c @ x)
    gap = abs(-value - dual)
    return LPResult(x, value, "optimal", resid, gap, eq_d, ub_d, res.message)


# --- linear systems -----------------------------------------------------------

def solve_linear_system(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise SingularSystemError("singular matrix", float(np.linalg.cond(A))) from None
    resid = float(np.max(np.abs(A @ x - b), initial=0.0))
    if not np.all(np.isfinite(x)) or resid > 1e-10 * (1.0 + float(np.max(np.abs(b), initial=0.0))):
        raise SingularSystemError(f"ill-conditioned system, residual {resid:.3g}",
                                  float(np.linalg.cond(A)))
    return x


class FactoredSystem:
    """LU factorization reused for ``A x = b`` and ``A^T x = b``."""

    def __init__(self, A: np.ndarray):
        self._lu = scipy.linalg.lu_factor(A, check_finite=False)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, b, check_finite=False)

    def solve_transposed(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, b, trans=1, check_finite=False)


# --- simplices ----------------------------------------------------------------

def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector (or each row of a matrix) onto the simplex."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return project_to_simplex(v[None, :])[0]
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - tau[:, None], 0.0)


@dataclass(frozen=True)
class SimplexProduct:
    blocks: tuple[int, ...]

    @classmethod
    def uniform(cls, n_blocks: int, size: int) -> "SimplexProduct":
        return cls((size,) * n_blocks)

    @property
    def dim(self) -> int:
        return sum(self.blocks)

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.blocks)])

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        off = self.offsets()
        return [x[off[i]:off[i + 1]] for i in range(len(self.blocks))]

    def project(self, x: np.ndarray) -> np.ndarray:
        if len(set(self.blocks)) == 1:
            k = self.blocks[0]
            return project_to_simplex(x.reshape(-1, k)).ravel()
        return np.concatenate([project_to_simplex(b) for b in self.split(x)])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([rng.dirichlet(np.ones(k)) for k in self.blocks])

    def max_violation(self, x: np.ndarray) -> float:
        parts = self.split(np.asarray(x, dtype=float))
        neg = max((float(-b.min()) for b in parts if b.size), default=0.0)
        tot = max((abs(float(b.sum()) - 1.0) for b in parts), default=0.0)
        return max(neg, tot, 0.0)

    def contains(self, x: np.ndarray, tol: float = 1e-10) -> bool:
        return np.size(x) == self.dim and self.max_violation(x) <= tol


# --- multistart projected ascent -------------------------------------------------

@dataclass
class MultiStartConfig:
    restarts: int = 32
    max_iter: int = 500
    step: float = 10.0  # c in the c / sqrt(k) schedule
    max_backtracks: int = 30
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")

    @classmethod
    def from_mapping(cls, m: dict | None, **overrides) -> "MultiStartConfig":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in (m or {}).items() if k in known}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass
class StartTrace:
    start: int
    value: float
    iterations: int
    status: str  # converged | max_iter | aborted


@dataclass
class MultiStartResult:
    point: np.ndarray
    value: float
    traces: list[StartTrace] = field(default_factory=list)
    best_start: int = 0


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


def projected_ascent(objective: Objective, domain: SimplexProduct, x0: np.ndarray,
                     config: MultiStartConfig) -> tuple[np.ndarray, float, int, str]:
    x = domain.project(np.asarray(x0, dtype=float))
    f, g = objective(x)
    if not math.isfinite(f):
        return x, f, 0, "aborted"
    for k in range(1, config.max_iter + 1):
        eta = config.step / math.sqrt(k)
        for _ in range(config.max_backtracks):
            y = domain.project(x + eta * g)
            fy, gy = objective(y)
            if not math.isfinite(fy):
                return x, f, k, "aborted"
            if fy > f:
                break
            eta *= 0.5
        else:
            return x, f, k, "converged"
        gain = fy - f
        x, f, g = y, fy, gy
        if gain < config.tol:
            return x, f, k, "converged"
    return x, f, config.max_iter, "max_iter"


def multistart_maximize(objective: Objective, domain: SimplexProduct,
                        config: MultiStartConfig,
                        seeds: Sequence[np.ndarray] = ()) -> MultiStartResult:
    """Best of projected ascent runs from ``seeds`` followed by ``config.restarts`` Dirichlet draws.

    ``objective(x)`` returns ``(value, ascent_direction)``. Ties in value go to the
    lower start index.
    """
    rng = np.random.default_rng(config.seed)
    starts = [np.asarray(s, dtype=float) for s in seeds]
    starts += [domain.sample(rng) for _ in range(config.restarts)]
    best: MultiStartResult | None = None
    traces = []
    for i, x0 in enumerate(starts):
        try:
            x, f, iters, status = projected_ascent(objective, domain, x0, config)
        except (FloatingPointError, SolverError) as exc:
            log.warning("restart %d aborted: %s", i, exc)
            traces.append(StartTrace(i, math.nan, 0, "aborted"))
            continue
        traces.append(StartTrace(i, f, iters, status))
        if status == "aborted":
            log.warning("restart %d aborted on a non-finite objective", i)
            continue
        if best is None or f > best.value:
            best = MultiStartResult(x, f, best_start=i)
    if best is None:
        raise SolverError("all restarts failed")
    best.traces = traces
    return best
