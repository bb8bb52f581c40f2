"""
Linear-program interface used by every node solve.

Two backends sit behind `LpBackend.solve`:
    - BundledSimplex: dense bounded-variable revised simplex with a
      bounded dual simplex for warm re-solves (numpy only).
    - HighsBackend: scipy.optimize.linprog(method="highs").

Dual sign convention (both backends): dual_eq and dual_ub are the
sensitivities of the optimal value to b_eq and b_ub, so for a binding row of
A_ub·x ≤ b_ub the dual is ≤ 0.
"""
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import optimize

from app.core.exceptions import InputError, LpSolverError, ShapeError

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
PIVOT_TOL = 1e-10
REFACTOR_EVERY = 50
BLAND_FACTOR = 50
TRACE_LENGTH = 20


class LpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class VarStatus(IntEnum):
    BASIC = 0
    AT_LOWER = 1
    AT_UPPER = 2
    FREE_ZERO = 3


# ============== Problem and solution ==============

@dataclass
class LinearProgram:
    """
    min c·x  s.t.  A_eq·x = b_eq,  A_ub·x ≤ b_ub,  lb ≤ x ≤ ub.

    lb defaults to 0 and ub to +∞; lb may be -∞ (free variables).
    """

    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    col_names: Optional[list[str]] = None
    row_names_eq: Optional[list[str]] = None
    row_names_ub: Optional[list[str]] = None
    name: str = "lp"

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        if not np.all(np.isfinite(self.c)):
            raise ShapeError("objective coefficients must be finite")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "eq")
        self.A_ub, self.b_ub = _rows(self.A_ub, self.b_ub, n, "ub")
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(-1)
        self.ub = np.full(n, math.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(-1)
        if self.lb.size != n or self.ub.size != n:
            raise ShapeError(f"bounds must have {n} entries")
        if np.any(self.lb > self.ub):
            raise ShapeError("a lower bound exceeds its upper bound")
        if np.any(self.lb == math.inf) or np.any(self.ub == -math.inf):
            raise ShapeError("bounds must allow a finite value")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.b_eq.size

    @property
    def n_ub(self) -> int:
        return self.b_ub.size

    def column_name(self, j: int) -> str:
        return self.col_names[j] if self.col_names else f"x{j}"

    def row_name(self, kind: str, i: int) -> str:
        names = self.row_names_eq if kind == "eq" else self.row_names_ub
        return names[i] if names else f"{kind}{i}"


def _rows(A, b, n: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if A is None and b is None:
        return np.zeros((0, n)), np.zeros(0)
    if A is None or b is None:
        raise ShapeError(f"A_{kind} and b_{kind} must be given together")
    b = np.asarray(b, dtype=float).reshape(-1)
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        A = A.reshape(b.size, n)
    if A.ndim != 2 or A.shape != (b.size, n):
        raise ShapeError(f"A_{kind} has shape {A.shape}, expected {(b.size, n)}")
    if not np.all(np.isfinite(b)):
        raise ShapeError(f"b_{kind} must be finite")
    return A, b


@dataclass
class Basis:
    """Warm-start information: status of every structural and slack column."""

    n_vars: int
    n_eq: int
    n_ub: int
    status: np.ndarray

    def extended(self, n_ub: int) -> "Basis":
        """Basis for the same LP with inequality rows appended; new slacks are basic."""
        added = n_ub - self.n_ub
        if added < 0:
            raise InputError("cannot shrink a basis")
        status = np.concatenate([self.status, np.full(added, VarStatus.BASIC, dtype=np.int8)])
        return Basis(self.n_vars, self.n_eq, n_ub, status)


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective: float
    dual_eq: np.ndarray
    dual_ub: np.ndarray
    reduced_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basis: Optional[Basis] = None
    iterations: int = 0
    warm_started: bool = False

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class LpBackend(Protocol):
    name: str

    def solve(self, lp: LinearProgram, warm_start: Optional[Basis] = None) -> LpSolution:
        ...


def _empty_solution(lp: LinearProgram, status: LpStatus, iterations: int = 0) -> LpSolution:
    nan = np.full(lp.n_vars, np.nan)
    return LpSolution(
        status=status,
        x=nan,
        objective=math.inf if status is LpStatus.INFEASIBLE else -math.inf,
        dual_eq=np.full(lp.n_eq, np.nan),
        dual_ub=np.full(lp.n_ub, np.nan),
        iterations=iterations,
    )


# ============== Bundled revised simplex ==============

class _Outcome(Enum):
    OPTIMAL = 1
    UNBOUNDED = 2
    INFEASIBLE = 3
    FAILED = 4


class BundledSimplex:
    """
    Bounded-variable revised simplex on the standard form

        [A_eq 0 | I_art] [x]   [b_eq]
        [A_ub I | I_art] [s] = [b_ub]

    with an explicit basis inverse updated by eta products and refactored
    every REFACTOR_EVERY pivots. Pricing is Dantzig until BLAND_FACTOR·m
    degenerate pivots have happened, then Bland.
    """

    name = "bundled"

    def __init__(
        self,
        feasibility_tol: float = FEASIBILITY_TOL,
        pivot_tol: float = PIVOT_TOL,
        max_iter: Optional[int] = None,
    ):
        self.feasibility_tol = feasibility_tol
        self.pivot_tol = pivot_tol
        self.max_iter = max_iter

    def solve(self, lp: LinearProgram, warm_start: Optional[Basis] = None) -> LpSolution:
        run = _SimplexRun(lp, self.feasibility_tol, self.pivot_tol, self.max_iter)
        if warm_start is not None:
            solution = run.warm(warm_start)
            if solution is not None:
                return solution
            logger.debug(f"Warm start rejected for {lp.name}; solving cold")
            run = _SimplexRun(lp, self.feasibility_tol, self.pivot_tol, self.max_iter)
        return run.cold()


class _SimplexRun:
    def __init__(self, lp: LinearProgram, feas_tol: float, pivot_tol: float, max_iter: Optional[int]):
        self.lp = lp
        self.feas_tol = feas_tol
        self.pivot_tol = pivot_tol
        n, m_eq, m_ub = lp.n_vars, lp.n_eq, lp.n_ub
        self.n, self.m_eq, self.m_ub = n, m_eq, m_ub
        self.m = m = m_eq + m_ub
        self.n_real = n + m_ub
        self.n_total = n + m_ub + m

        M = np.zeros((m, self.n_total))
        M[:m_eq, :n] = lp.A_eq
        M[m_eq:, :n] = lp.A_ub
        M[m_eq:, n:n + m_ub] = np.eye(m_ub)
        M[:, self.n_real:] = np.eye(m)
        self.M = M
        self.rhs = np.concatenate([lp.b_eq, lp.b_ub])

        self.lower = np.concatenate([lp.lb, np.zeros(m_ub), np.zeros(m)])
        self.upper = np.concatenate([lp.ub, np.full(m_ub, math.inf), np.zeros(m)])
        self.cost = np.concatenate([lp.c, np.zeros(m_ub + m)])

        self.max_iter = max_iter or max(1000, 50 * (m + self.n_total))
        self.bland_after = BLAND_FACTOR * max(m, 1)
        self.iterations = 0
        self.degenerate = 0
        self.since_refactor = 0
        self.trace: list[str] = []

        self.status = np.full(self.n_total, VarStatus.AT_LOWER, dtype=np.int8)
        self.basic = np.zeros(m, dtype=int)
        self.x = np.zeros(self.n_total)
        self.Binv = np.eye(m)

    # ----- entry points -----

    def cold(self) -> LpSolution:
        self._initial_basis()
        phase_one_cost = np.zeros(self.n_total)
        phase_one_cost[self.n_real:] = 1.0
        outcome = self._primal(phase_one_cost)
        if outcome is _Outcome.FAILED:
            self._fail("phase I did not terminate")
        infeasibility = float(self.x[self.n_real:].sum())
        if infeasibility > 1e-7 * max(1.0, float(np.abs(self.rhs).max(initial=0.0))):
            return _empty_solution(self.lp, LpStatus.INFEASIBLE, self.iterations)

        self._drive_out_artificials()
        self.upper[self.n_real:] = 0.0
        return self._phase_two()

    def warm(self, basis: Basis) -> Optional[LpSolution]:
        if (basis.n_vars, basis.n_eq) != (self.n, self.m_eq) or basis.n_ub > self.m_ub:
            return None
        if basis.n_ub < self.m_ub:
            basis = basis.extended(self.m_ub)
        status = np.asarray(basis.status, dtype=np.int8)
        basic = np.flatnonzero(status == VarStatus.BASIC)
        if basic.size != self.m:
            return None

        self.status[: self.n_real] = status
        self.status[self.n_real:] = VarStatus.AT_LOWER
        self.upper[self.n_real:] = 0.0
        self.basic = basic
        for j in np.flatnonzero(status != VarStatus.BASIC):
            if not self._place_nonbasic(j):
                return None
        if not self._refactor(strict=False):
            return None

        d = self._reduced_costs(self.cost)
        if self._primal_feasible():
            solution = self._phase_two(warm=True)
        elif self._dual_feasible(d):
            outcome = self._dual()
            if outcome is not _Outcome.OPTIMAL:
                return None
            solution = self._phase_two(warm=True)
        else:
            return None
        return solution

    # ----- setup -----

    def _place_nonbasic(self, j: int) -> bool:
        lo, hi = self.lower[j], self.upper[j]
        st = self.status[j]
        if st == VarStatus.AT_UPPER and math.isfinite(hi):
            self.x[j] = hi
        elif st == VarStatus.AT_LOWER and math.isfinite(lo):
            self.x[j] = lo
        elif math.isinf(lo) and math.isinf(hi):
            self.status[j] = VarStatus.FREE_ZERO
            self.x[j] = 0.0
        elif math.isfinite(lo):
            self.status[j] = VarStatus.AT_LOWER
            self.x[j] = lo
        elif math.isfinite(hi):
            self.status[j] = VarStatus.AT_UPPER
            self.x[j] = hi
        else:
            return False
        return True

    def _initial_basis(self):
        n, m_eq = self.n, self.m_eq
        for j in range(n):
            self.status[j] = VarStatus.AT_LOWER
            self._place_nonbasic(j)
        self.x[n:] = 0.0
        self.status[n:] = VarStatus.AT_LOWER

        residual = self.rhs - self.M[:, :n] @ self.x[:n]
        basic = np.zeros(self.m, dtype=int)
        for i in range(self.m):
            art = self.n_real + i
            if i >= m_eq and residual[i] >= 0:
                slack = n + (i - m_eq)
                basic[i] = slack
                self.x[slack] = residual[i]
                self.upper[art] = 0.0
            else:
                basic[i] = art
                sign = 1.0 if residual[i] >= 0 else -1.0
                self.M[i, art] = sign
                self.x[art] = abs(residual[i])
                self.upper[art] = math.inf
            self.status[basic[i]] = VarStatus.BASIC
        self.basic = basic
        self.Binv = np.diag(1.0 / np.diag(self.M[:, basic]))
        self.since_refactor = 0

    def _refactor(self, strict: bool = True) -> bool:
        if self.m == 0:
            self.Binv = np.zeros((0, 0))
            self.since_refactor = 0
            return True
        try:
            self.Binv = np.linalg.inv(self.M[:, self.basic])
        except np.linalg.LinAlgError:
            if strict:
                self._fail("basis matrix became singular")
            return False
        if not np.all(np.isfinite(self.Binv)):
            if strict:
                self._fail("basis inverse is not finite")
            return False
        nonbasic = self.status != VarStatus.BASIC
        self.x[self.basic] = self.Binv @ (self.rhs - self.M[:, nonbasic] @ self.x[nonbasic])
        self.since_refactor = 0
        return True

    # ----- helpers -----

    def _reduced_costs(self, cost: np.ndarray) -> np.ndarray:
        y = cost[self.basic] @ self.Binv
        return cost - y @ self.M

    def _primal_feasible(self) -> bool:
        xb = self.x[self.basic]
        tol = self.feas_tol * (1.0 + np.abs(xb))
        return bool(
            np.all(xb >= self.lower[self.basic] - tol) and np.all(xb <= self.upper[self.basic] + tol)
        )

    def _dual_feasible(self, d: np.ndarray) -> bool:
        for j in np.flatnonzero(self.status != VarStatus.BASIC):
            if self.lower[j] == self.upper[j]:
                continue
            st = self.status[j]
            if st == VarStatus.AT_LOWER and d[j] < -self.feas_tol:
                return False
            if st == VarStatus.AT_UPPER and d[j] > self.feas_tol:
                return False
            if st == VarStatus.FREE_ZERO and abs(d[j]) > self.feas_tol:
                return False
        return True

    def _pivot(self, r: int, j: int, alpha: np.ndarray):
        """Replace basic position r by column j (alpha = B⁻¹·M_j)."""
        pivot = alpha[r]
        row = self.Binv[r] / pivot
        self.Binv -= np.outer(alpha, row)
        self.Binv[r] = row
        self.basic[r] = j
        self.status[j] = VarStatus.BASIC
        self.since_refactor += 1
        if self.since_refactor >= REFACTOR_EVERY:
            self._refactor()

    def _record(self, phase: str, entering: int, leaving: int, step: float):
        self.trace.append(f"{phase} it={self.iterations} in={entering} out={leaving} step={step:.3e}")
        if len(self.trace) > TRACE_LENGTH:
            self.trace.pop(0)

    def _fail(self, message: str):
        raise LpSolverError(f"{self.lp.name}: {message} after {self.iterations} iterations", list(self.trace))

    # ----- primal simplex -----

    def _choose_entering(self, d: np.ndarray, bland: bool) -> tuple[int, float]:
        best_j, best_score, direction = -1, 0.0, 0.0
        tol = self.feas_tol
        for j in np.flatnonzero(self.status != VarStatus.BASIC):
            if self.lower[j] == self.upper[j]:
                continue
            st = self.status[j]
            dj = d[j]
            if st == VarStatus.AT_LOWER and dj < -tol:
                cand = 1.0
            elif st == VarStatus.AT_UPPER and dj > tol:
                cand = -1.0
            elif st == VarStatus.FREE_ZERO and abs(dj) > tol:
                cand = -math.copysign(1.0, dj)
            else:
                continue
            if bland:
                return int(j), cand
            if abs(dj) > best_score:
                best_j, best_score, direction = int(j), abs(dj), cand
        return best_j, direction

    def _primal(self, cost: np.ndarray) -> _Outcome:
        while True:
            if self.iterations >= self.max_iter:
                return _Outcome.FAILED
            d = self._reduced_costs(cost)
            bland = self.degenerate >= self.bland_after
            j, direction = self._choose_entering(d, bland)
            if j < 0:
                return _Outcome.OPTIMAL

            alpha = self.Binv @ self.M[:, j]
            step, r, to_upper = self._ratio_test(alpha, direction, bland)
            flip = self.upper[j] - self.lower[j]
            if math.isfinite(flip) and flip <= step:
                step, r = flip, -1
            if math.isinf(step):
                return _Outcome.UNBOUNDED

            self.iterations += 1
            self.degenerate += step <= 1e-12
            self.x[j] += direction * step
            self.x[self.basic] -= direction * step * alpha
            if r < 0:
                self.status[j] = VarStatus.AT_UPPER if direction > 0 else VarStatus.AT_LOWER
                self._record("primal", j, -1, step)
                continue

            leaving = self.basic[r]
            self._record("primal", j, int(leaving), step)
            self.status[leaving] = VarStatus.AT_UPPER if to_upper else VarStatus.AT_LOWER
            self.x[leaving] = self.upper[leaving] if to_upper else self.lower[leaving]
            self._pivot(r, j, alpha)

    def _ratio_test(self, alpha: np.ndarray, direction: float, bland: bool) -> tuple[float, int, bool]:
        best, r, to_upper, best_pivot = math.inf, -1, False, 0.0
        for i in range(self.m):
            a = alpha[i] * direction
            if abs(a) <= self.pivot_tol:
                continue
            k = self.basic[i]
            if a > 0:
                if math.isinf(self.lower[k]):
                    continue
                ratio, upper_hit = (self.x[k] - self.lower[k]) / a, False
            else:
                if math.isinf(self.upper[k]):
                    continue
                ratio, upper_hit = (self.upper[k] - self.x[k]) / (-a), True
            ratio = max(ratio, 0.0)
            if ratio < best - 1e-12:
                best, r, to_upper, best_pivot = ratio, i, upper_hit, abs(a)
            elif ratio <= best + 1e-12 and r >= 0:
                # ties: Bland takes the smallest column index, Dantzig the largest pivot
                if bland and k < self.basic[r]:
                    best, r, to_upper, best_pivot = min(best, ratio), i, upper_hit, abs(a)
                elif not bland and abs(a) > best_pivot:
                    best, r, to_upper, best_pivot = min(best, ratio), i, upper_hit, abs(a)
        return best, r, to_upper

    def _drive_out_artificials(self):
        for r in range(self.m):
            k = self.basic[r]
            if k < self.n_real:
                continue
            row = self.Binv[r] @ self.M[:, : self.n_real]
            candidates = [
                j for j in np.flatnonzero(np.abs(row) > 1e-7)
                if self.status[j] != VarStatus.BASIC
            ]
            if not candidates:
                continue  # redundant row; the artificial stays basic at zero
            j = max(candidates, key=lambda col: abs(row[col]))
            alpha = self.Binv @ self.M[:, j]
            self.status[k] = VarStatus.AT_LOWER
            self.x[k] = 0.0
            self._pivot(r, int(j), alpha)
        self.upper[self.n_real:] = 0.0

    # ----- dual simplex -----

    def _dual(self) -> _Outcome:
        while True:
            if self.iterations >= self.max_iter:
                return _Outcome.FAILED
            xb = self.x[self.basic]
            lo, hi = self.lower[self.basic], self.upper[self.basic]
            below = lo - xb
            above = xb - hi
            infeas = np.maximum(below, above)
            r = int(np.argmax(infeas))
            if infeas[r] <= self.feas_tol * (1.0 + abs(xb[r])):
                return _Outcome.OPTIMAL
            going_up = below[r] > above[r]  # leaving variable rises to its lower bound

            d = self._reduced_costs(self.cost)
            row = self.Binv[r] @ self.M
            best_j, best_ratio, best_pivot = -1, math.inf, 0.0
            for j in np.flatnonzero(self.status != VarStatus.BASIC):
                if self.lower[j] == self.upper[j]:
                    continue
                a = row[j]
                if abs(a) <= self.pivot_tol:
                    continue
                st = self.status[j]
                # increasing x_j moves x_B[r] by -a
                if going_up:
                    ok = (st == VarStatus.AT_LOWER and a < 0) or (st == VarStatus.AT_UPPER and a > 0)
                else:
                    ok = (st == VarStatus.AT_LOWER and a > 0) or (st == VarStatus.AT_UPPER and a < 0)
                ok = ok or st == VarStatus.FREE_ZERO
                if not ok:
                    continue
                ratio = abs(d[j]) / abs(a)
                if ratio < best_ratio - 1e-12 or (ratio <= best_ratio + 1e-12 and abs(a) > best_pivot):
                    best_j, best_ratio, best_pivot = int(j), ratio, abs(a)
            if best_j < 0:
                return _Outcome.INFEASIBLE

            target = self.lower[self.basic[r]] if going_up else self.upper[self.basic[r]]
            alpha = self.Binv @ self.M[:, best_j]
            delta = (self.x[self.basic[r]] - target) / alpha[r]
            self.iterations += 1
            self.x[best_j] += delta
            self.x[self.basic] -= delta * alpha
            leaving = self.basic[r]
            self._record("dual", best_j, int(leaving), abs(delta))
            self.status[leaving] = VarStatus.AT_LOWER if going_up else VarStatus.AT_UPPER
            self.x[leaving] = target
            self._pivot(r, best_j, alpha)

    # ----- phase II and extraction -----

    def _phase_two(self, warm: bool = False) -> LpSolution:
        outcome = self._primal(self.cost)
        if outcome is _Outcome.FAILED:
            self._fail("iteration limit reached")
        if outcome is _Outcome.UNBOUNDED:
            return _empty_solution(self.lp, LpStatus.UNBOUNDED, self.iterations)
        self._refactor()

        y = self.cost[self.basic] @ self.Binv
        d = self.cost - y @ self.M
        x = self.x[: self.n].copy()
        x = np.where(np.abs(x) < 1e-13, 0.0, x)
        basis = Basis(self.n, self.m_eq, self.m_ub, self.status[: self.n_real].copy())
        if np.count_nonzero(basis.status == VarStatus.BASIC) != self.m:
            basis = None  # an artificial stayed basic on a redundant row
        return LpSolution(
            status=LpStatus.OPTIMAL,
            x=x,
            objective=float(self.lp.c @ x),
            dual_eq=y[: self.m_eq].copy(),
            dual_ub=y[self.m_eq:].copy(),
            reduced_costs=d[: self.n].copy(),
            basis=basis,
            iterations=self.iterations,
            warm_started=warm,
        )


# ============== HiGHS backend ==============

class HighsBackend:
    """scipy's HiGHS interface; warm starts are ignored."""

    name = "highs"

    def solve(self, lp: LinearProgram, warm_start: Optional[Basis] = None) -> LpSolution:
        bounds = [
            (None if math.isinf(lo) else lo, None if math.isinf(hi) else hi)
            for lo, hi in zip(lp.lb, lp.ub)
        ]
        res = optimize.linprog(
            lp.c,
            A_ub=lp.A_ub if lp.n_ub else None,
            b_ub=lp.b_ub if lp.n_ub else None,
            A_eq=lp.A_eq if lp.n_eq else None,
            b_eq=lp.b_eq if lp.n_eq else None,
            bounds=bounds,
            method="highs",
        )
        if res.status == 2:
            return _empty_solution(lp, LpStatus.INFEASIBLE, int(res.nit))
        if res.status == 3:
            return _empty_solution(lp, LpStatus.UNBOUNDED, int(res.nit))
        if res.status != 0:
            raise LpSolverError(f"{lp.name}: HiGHS failed ({res.message})")
        dual_eq = np.asarray(res.eqlin.marginals) if lp.n_eq else np.zeros(0)
        dual_ub = np.asarray(res.ineqlin.marginals) if lp.n_ub else np.zeros(0)
        return LpSolution(
            status=LpStatus.OPTIMAL,
            x=np.asarray(res.x, dtype=float),
            objective=float(res.fun),
            dual_eq=dual_eq,
            dual_ub=dual_ub,
            reduced_costs=np.asarray(res.lower.marginals) + np.asarray(res.upper.marginals),
            iterations=int(res.nit),
        )


# ============== Factory ==============

BACKENDS = ("bundled", "highs")


def get_backend(name: str = "bundled", feasibility_tol: float = FEASIBILITY_TOL, pivot_tol: float = PIVOT_TOL) -> LpBackend:
    if name == "bundled":
        return BundledSimplex(feasibility_tol=feasibility_tol, pivot_tol=pivot_tol)
    if name == "highs":
        return HighsBackend()
    raise InputError(f"unknown LP backend '{name}'; valid backends: {', '.join(BACKENDS)}")


def solve_lp(lp: LinearProgram, warm_start: Optional[Basis] = None, backend: Optional[LpBackend] = None) -> LpSolution:
    """Solve `lp` with the given backend (bundled by default)."""
    return (backend or BundledSimplex()).solve(lp, warm_start)


# ============== LP text dump ==============

def _terms(coefficients: Sequence[float], lp: LinearProgram) -> str:
    parts = []
    for j, value in enumerate(coefficients):
        if value == 0:
            continue
        sign = "-" if value < 0 else "+"
        parts.append(f"{sign} {abs(value):.17g} {lp.column_name(j)}")
    return " ".join(parts) if parts else "0 " + lp.column_name(0)


def dump_lp(lp: LinearProgram) -> str:
    """Render `lp` in CPLEX LP text format with stable row and column names."""
    out = io.StringIO()
    out.write(f"\\ {lp.name}\n")
    out.write("Minimize\n")
    out.write(f" obj: {_terms(lp.c, lp)}\n")
    out.write("Subject To\n")
    for i in range(lp.n_eq):
        out.write(f" {lp.row_name('eq', i)}: {_terms(lp.A_eq[i], lp)} = {lp.b_eq[i]:.17g}\n")
    for i in range(lp.n_ub):
        out.write(f" {lp.row_name('ub', i)}: {_terms(lp.A_ub[i], lp)} <= {lp.b_ub[i]:.17g}\n")
    out.write("Bounds\n")
    for j in range(lp.n_vars):
        lo, hi = lp.lb[j], lp.ub[j]
        name = lp.column_name(j)
        if math.isinf(lo) and math.isinf(hi):
            out.write(f" {name} free\n")
        elif math.isinf(lo):
            out.write(f" -inf <= {name} <= {hi:.17g}\n")
        elif math.isinf(hi):
            if lo != 0:
                out.write(f" {name} >= {lo:.17g}\n")
        else:
            out.write(f" {lo:.17g} <= {name} <= {hi:.17g}\n")
    out.write("End\n")
    return out.getvalue()
