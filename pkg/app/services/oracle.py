"""
Brute-force reference solvers used to validate the decomposition engine.

    - inner_max_dual: the two-variable dual of the worst-case expectation,
      minimized by nested one-dimensional searches;
    - inner_max_primal: the primal maximization over the divergence ball
      (small descendant counts only);
    - two_stage_grid: grid search over a one- or two-dimensional first stage;
    - risk_neutral_extensive: deterministic-equivalent LP of the nominal problem;
    - root_inner_max: the root's worst-case expectation over converged
      recourse values, recomputed by seeded primal multistart;
    - mean_cvar_direct: (1−κ)·E[v] + κ·CVaR_α(v) evaluated at breakpoints.

LPs here go through HiGHS so oracle values do not depend on the engine's
bundled simplex.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy import optimize, sparse

from app.core.exceptions import (
    FeasibilityViolationError,
    InputError,
    OracleBracketError,
    OracleSizeError,
)
from app.services.divergence import (
    INF,
    DivergenceKind,
    DivergenceSpec,
    argmax_distribution,
    conjugate_array,
    conjugate_grad_array,
    divergence,
)
from app.services.lp_backend import HighsBackend, LinearProgram, LpStatus
from app.services.scenario_tree import ScenarioTree, StageData

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
LAMBDA_FLOOR = 1e-8
LAMBDA_GROWTH = 10.0
LAMBDA_EXPANSIONS = 12
SEARCH_TOL = 1e-12
SEARCH_MAX_STEPS = 300
PRIMAL_MAX_OUTCOMES = 6
PRIMAL_STARTS = 200
EXTENSIVE_NODE_CAP = 10_000
GRID_MAX_DIM = 2
# ρ at or below this value is compared against the risk-neutral LP for equality
RISK_NEUTRAL_RHO = 1e-9


# ============== Inner maximization ==============

@dataclass(frozen=True)
class InnerMaxProblem:
    """max Σ p·v over distributions p with I_φ(p, q) ≤ ρ."""

    values: np.ndarray
    q: np.ndarray
    rho: float
    divergence: DivergenceSpec

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        q = np.asarray(self.q, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "q", q)
        if values.size != q.size or values.size == 0:
            raise InputError(f"{values.size} values for {q.size} probabilities")
        if not self.rho > 0:
            raise InputError(f"rho must be positive, got {self.rho}")
        if np.any(q < 0) or abs(float(q.sum()) - 1.0) > 1e-9:
            raise InputError("q must be a probability vector")

    @property
    def spread(self) -> float:
        return float(self.values.max() - self.values.min())


@dataclass
class InnerMaxResult:
    value: float
    lam: float
    mu: float
    p: np.ndarray


def _golden_min(fn, lo: float, hi: float, tol: float) -> tuple[float, float]:
    """Minimize a unimodal function on [lo, hi]; returns (argmin, value)."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(SEARCH_MAX_STEPS):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fn(d)
    x = c if fc <= fd else d
    return x, min(fc, fd)


def _dual_value(prob: InnerMaxProblem, lam: float, mu: float) -> float:
    s = (prob.values - mu) / lam
    conj = conjugate_array(prob.divergence, s)
    if not np.all(np.isfinite(conj)):
        return INF
    return mu + prob.rho * lam + lam * float(prob.q @ conj)


def _best_mu(prob: InnerMaxProblem, lam: float) -> tuple[float, float]:
    v = prob.values
    spread = max(prob.spread, 1e-12)
    lo, hi = float(v.min()) - spread, float(v.max()) + spread
    sbar = prob.divergence.sbar
    if math.isfinite(sbar):
        lo = max(lo, float(v.max()) - sbar * lam * (1.0 - 1e-12))
    tol = SEARCH_TOL * max(1.0, abs(hi), abs(lo))
    return _golden_min(lambda mu: _dual_value(prob, lam, mu), lo, hi, tol)


def _profile(prob: InnerMaxProblem, lam: float) -> float:
    return _best_mu(prob, lam)[1]


def inner_max_dual(prob: InnerMaxProblem) -> InnerMaxResult:
    """
    min over λ ≥ 0, μ of μ + ρλ + λ·Σ q φ*((v−μ)/λ).

    Outer golden-section search on log λ over [1e-8, λ_hi] with λ_hi
    starting at spread/ρ and widened tenfold while the profile still
    decreases there; inner golden-ratio ternary search on μ. The λ = 0
    value max(v) is compared separately.
    """
    v, q = prob.values, prob.q
    top = float(v.max())
    if prob.spread == 0.0:
        return InnerMaxResult(top, 0.0, top, q.copy())

    lam_hi = max(prob.spread / prob.rho, 10.0 * LAMBDA_FLOOR)
    for _ in range(LAMBDA_EXPANSIONS):
        if _profile(prob, lam_hi * 1.01) >= _profile(prob, lam_hi):
            break
        lam_hi *= LAMBDA_GROWTH
    else:
        raise OracleBracketError(
            f"dual profile still decreasing at lambda={lam_hi:.3g}; no bracket found"
        )

    log_lam, _ = _golden_min(
        lambda t: _profile(prob, math.exp(t)), math.log(LAMBDA_FLOOR), math.log(lam_hi), 1e-10
    )
    lam = math.exp(log_lam)
    mu, value = _best_mu(prob, lam)

    if top <= value:
        return InnerMaxResult(top, 0.0, top, argmax_distribution(v))
    p = q * conjugate_grad_array(prob.divergence, (v - mu) / lam)
    return InnerMaxResult(value, lam, mu, p)


def _phi_grad(spec: DivergenceSpec, u: np.ndarray) -> np.ndarray:
    u = np.maximum(u, 1e-12)
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return 2.0 * (u - 1.0)
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        return np.log(u)
    if kind is DivergenceKind.HELLINGER:
        return 1.0 - 1.0 / np.sqrt(u)
    if kind is DivergenceKind.BURG:
        return 1.0 - 1.0 / u
    raise InputError("the interval divergence has no gradient; it is solved as an LP")


def _radial_point(prob: InnerMaxProblem, target: np.ndarray) -> np.ndarray:
    """Farthest point q + t·(target − q), t ∈ [0, 1], inside the divergence ball."""
    q = prob.q
    if divergence(prob.divergence, target, q) <= prob.rho:
        return target
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if divergence(prob.divergence, q + mid * (target - q), q) <= prob.rho:
            lo = mid
        else:
            hi = mid
    return q + lo * (target - q)


def _simplex_grid(n: int, step: float) -> np.ndarray:
    ticks = int(round(1.0 / step))
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        a = np.arange(ticks + 1) / ticks
        return np.column_stack([a, 1.0 - a])
    rows = [(i, j, ticks - i - j) for i in range(ticks + 1) for j in range(ticks + 1 - i)]
    return np.asarray(rows, dtype=float) / ticks


@dataclass
class PrimalResult:
    value: float
    p: np.ndarray


def inner_max_primal(
    prob: InnerMaxProblem,
    starts: int = PRIMAL_STARTS,
    seed: int = 0,
    grid_step: float = 0.01,
) -> PrimalResult:
    """
    Direct maximization of Σ p·v over the divergence ball.

    The interval divergence gives a box-constrained LP solved exactly;
    other divergences use SLSQP from the radial vertex points and `starts`
    Dirichlet draws, plus a dense simplex grid when there are at most
    three outcomes. The best feasible point found is returned.
    """
    n = prob.values.size
    if n > PRIMAL_MAX_OUTCOMES:
        raise OracleSizeError(f"primal inner-max oracle supports at most {PRIMAL_MAX_OUTCOMES} outcomes, got {n}")
    v, q, spec = prob.values, prob.q, prob.divergence
    if prob.spread == 0.0:
        return PrimalResult(float(v[0]), q.copy())

    if spec.kind is DivergenceKind.INTERVAL_CVAR:
        lo, hi = spec.interval
        res = optimize.linprog(
            -v, A_eq=np.ones((1, n)), b_eq=[1.0],
            bounds=list(zip(lo * q, hi * q)), method="highs",
        )
        return PrimalResult(-float(res.fun), np.asarray(res.x))

    # unit-spread scaling keeps SLSQP well conditioned
    base, spread = float(v.min()), prob.spread
    w = (v - base) / spread
    positive = q > 0
    floor = 1e-12 if spec.kind is DivergenceKind.BURG else 0.0

    def budget(p: np.ndarray) -> float:
        return prob.rho - float(q[positive] @ _phi_value(spec, p[positive] / q[positive]))

    def budget_grad(p: np.ndarray) -> np.ndarray:
        grad = np.zeros(n)
        grad[positive] = -_phi_grad(spec, p[positive] / q[positive])
        return grad

    constraints = [
        {"type": "eq", "fun": lambda p: float(p.sum()) - 1.0, "jac": lambda p: np.ones(n)},
        {"type": "ineq", "fun": budget, "jac": budget_grad},
    ]
    bounds = [(floor if positive[i] else 0.0, 1.0) for i in range(n)]

    candidates = [q.copy()]
    candidates += [_radial_point(prob, np.eye(n)[i]) for i in range(n)]
    rng = np.random.default_rng(seed)
    candidates += [_radial_point(prob, d) for d in rng.dirichlet(np.ones(n), size=starts)]

    best_value, best_p = -INF, q.copy()

    def consider(p: np.ndarray):
        nonlocal best_value, best_p
        p = np.clip(p, 0.0, None)
        total = float(p.sum())
        if total <= 0:
            return
        p = p / total
        if divergence(spec, p, q) > prob.rho + 1e-9:
            return
        value = float(p @ w)
        if value > best_value:
            best_value, best_p = value, p

    for start in candidates:
        consider(start)
        res = optimize.minimize(
            lambda p: -float(p @ w),
            start,
            jac=lambda p: -w,
            method="SLSQP",
            bounds=bounds,
            constraints=constraints,
            options={"ftol": 1e-14, "maxiter": 500},
        )
        consider(res.x)

    if n <= 3:
        for p in _simplex_grid(n, grid_step):
            consider(p)

    return PrimalResult(base + spread * best_value, best_p)


def _phi_value(spec: DivergenceSpec, u: np.ndarray) -> np.ndarray:
    kind = spec.kind
    if kind is DivergenceKind.MODIFIED_CHI2:
        return (u - 1.0) ** 2
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        safe = np.maximum(u, 1e-300)
        return np.where(u > 0, u * np.log(safe), 0.0) - u + 1.0
    if kind is DivergenceKind.HELLINGER:
        return (np.sqrt(np.maximum(u, 0.0)) - 1.0) ** 2
    safe = np.maximum(u, 1e-300)
    return -np.log(safe) + u - 1.0


# ============== Mean-CVaR ==============

def mean_cvar_direct(values: Sequence[float], q: Sequence[float], kappa: float, alpha: float) -> float:
    """(1−κ)·E_q[v] + κ·min_μ {μ + E_q[(v−μ)+]/(1−α)}, minimized over the breakpoints μ ∈ v."""
    if not 0.0 <= kappa <= 1.0:
        raise InputError(f"kappa must lie in [0, 1], got {kappa}")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    mean = float(q @ v)
    excess = np.maximum(v[None, :] - v[:, None], 0.0) @ q
    cvar = float(np.min(v + excess / (1.0 - alpha)))
    return (1.0 - kappa) * mean + kappa * cvar


# ============== Two-stage grid ==============

@dataclass
class GridSpec:
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None
    points: int = 41
    refinements: int = 2


@dataclass
class GridResult:
    x: np.ndarray
    value: float
    resolution: float
    evaluations: int = 0


def _stage_lp(data: StageData, x_prev: np.ndarray, name: str) -> LinearProgram:
    return LinearProgram(
        c=data.c,
        A_eq=data.A,
        b_eq=data.rhs(x_prev),
        A_ub=data.A_ub,
        b_ub=data.rhs_ub(x_prev),
        ub=data.upper_bounds,
        name=name,
    )


def _first_stage_feasible(data: StageData, x: np.ndarray, tol: float = 1e-9) -> bool:
    if data.n_rows and np.any(np.abs(data.A @ x - data.b) > tol * max(1.0, float(np.abs(data.b).max()))):
        return False
    if data.n_ub_rows and np.any(data.A_ub @ x > data.b_ub + tol * max(1.0, float(np.abs(data.b_ub).max()))):
        return False
    return bool(np.all(x >= -tol) and np.all(x <= data.upper_bounds + tol))


class TwoStageEvaluator:
    """Worst-case objective c·x + max_p Σ p·Q(x) of a two-stage tree at a first-stage point."""

    def __init__(self, tree: ScenarioTree, spec: DivergenceSpec):
        if tree.stage_count != 2:
            raise OracleSizeError(f"two-stage oracle needs a 2-stage tree, got {tree.stage_count} stages")
        self.tree = tree
        self.spec = spec
        self.root = tree.root.id
        self.root_data = tree.data(self.root)
        if self.root_data.n_vars > GRID_MAX_DIM:
            raise OracleSizeError(
                f"two-stage oracle supports at most {GRID_MAX_DIM} first-stage variables, got {self.root_data.n_vars}"
            )
        self.children = tree.children(self.root)
        self.q = tree.descendant_probabilities(self.root)
        self.rho = tree.rho_for(self.root)
        self.backend = HighsBackend()
        self.evaluations = 0

    def recourse_values(self, x: np.ndarray) -> np.ndarray:
        values = np.empty(len(self.children))
        for k, child in enumerate(self.children):
            lp = _stage_lp(self.tree.data(child), x, f"leaf{child}")
            result = self.backend.solve(lp)
            values[k] = result.objective if result.status is LpStatus.OPTIMAL else INF
        return values

    def __call__(self, x: Sequence[float]) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not _first_stage_feasible(self.root_data, x):
            return INF
        self.evaluations += 1
        values = self.recourse_values(x)
        if not np.all(np.isfinite(values)):
            return INF
        inner = inner_max_dual(InnerMaxProblem(values, self.q, self.rho, self.spec))
        return float(self.root_data.c @ x) + inner.value


def two_stage_grid(tree: ScenarioTree, spec: DivergenceSpec, grid: Optional[GridSpec] = None) -> GridResult:
    """
    Grid search for the first-stage decision, refined around the incumbent,
    then polished with a bounded scalar search (one variable) or Nelder–Mead
    (two variables).
    """
    grid = grid or GridSpec()
    objective = TwoStageEvaluator(tree, spec)
    data = objective.root_data
    dim = data.n_vars
    lower = np.zeros(dim) if grid.lower is None else np.asarray(grid.lower, dtype=float)
    upper = data.upper_bounds.copy() if grid.upper is None else np.asarray(grid.upper, dtype=float)
    if not np.all(np.isfinite(upper)):
        raise InputError("two-stage grid needs finite upper bounds for every first-stage variable")

    lo, hi = lower.copy(), upper.copy()
    best_x, best_value = lo.copy(), INF
    step = float(np.max(hi - lo)) / max(grid.points - 1, 1)
    for round_ in range(grid.refinements + 1):
        axes = [np.linspace(lo[i], hi[i], grid.points) for i in range(dim)]
        steps = np.array([(hi[i] - lo[i]) / max(grid.points - 1, 1) for i in range(dim)])
        for point in np.array(np.meshgrid(*axes, indexing="ij")).reshape(dim, -1).T:
            value = objective(point)
            if value < best_value:
                best_x, best_value = point.copy(), value
        step = float(steps.max())
        logger.debug(f"Grid round {round_}: best value {best_value:.10g} at {best_x.tolist()}")
        lo = np.maximum(lower, best_x - 2.0 * steps)
        hi = np.minimum(upper, best_x + 2.0 * steps)

    if math.isfinite(best_value):
        if dim == 1:
            a, b = float(lo[0]), float(hi[0])
            if b > a:
                res = optimize.minimize_scalar(
                    lambda t: objective([t]), bounds=(a, b), method="bounded", options={"xatol": 1e-10}
                )
                if res.fun < best_value:
                    best_x, best_value = np.array([res.x]), float(res.fun)
        else:
            res = optimize.minimize(
                lambda z: objective(z) if np.all((z >= lower) & (z <= upper)) else INF,
                best_x,
                method="Nelder-Mead",
                options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 2000},
            )
            if res.fun < best_value:
                best_x, best_value = np.asarray(res.x), float(res.fun)

    return GridResult(best_x, best_value, step, objective.evaluations)


# ============== Risk-neutral extensive form ==============

def risk_neutral_extensive(tree: ScenarioTree, node_cap: int = EXTENSIVE_NODE_CAP) -> float:
    """
    Deterministic-equivalent LP of the nominal expected-cost problem:
    one variable block per node, objective weighted by path probability.
    """
    if len(tree) > node_cap:
        raise OracleSizeError(f"extensive form supports at most {node_cap} nodes, tree has {len(tree)}")

    path_prob = {tree.root.id: 1.0}
    for t in range(2, tree.stage_count + 1):
        for node_id in tree.nodes_at(t):
            node = tree.node(node_id)
            path_prob[node_id] = path_prob[node.ancestor_id] * node.conditional_prob

    offsets: dict[int, int] = {}
    total = 0
    for node in tree:
        offsets[node.id] = total
        total += tree.data(node.id).n_vars

    c = np.zeros(total)
    upper = np.full(total, INF)
    eq_blocks, eq_rhs, ub_blocks, ub_rhs = [], [], [], []
    row_eq = row_ub = 0
    for node in tree:
        data = tree.data(node.id)
        start, n = offsets[node.id], data.n_vars
        c[start:start + n] = path_prob[node.id] * data.c
        upper[start:start + n] = data.upper_bounds
        parent = None if node.ancestor_id is None else offsets[node.ancestor_id]

        def block(A: np.ndarray, B: np.ndarray, row: int) -> sparse.coo_matrix:
            own = sparse.coo_matrix(A)
            rows, cols, vals = [own.row + row], [own.col + start], [own.data]
            if parent is not None and B.size:
                link = sparse.coo_matrix(-B)
                rows.append(link.row + row)
                cols.append(link.col + parent)
                vals.append(link.data)
            return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

        if data.n_rows:
            eq_blocks.append(block(data.A, data.B, row_eq))
            eq_rhs.append(data.b)
            row_eq += data.n_rows
        if data.n_ub_rows:
            ub_blocks.append(block(data.A_ub, data.B_ub, row_ub))
            ub_rhs.append(data.b_ub)
            row_ub += data.n_ub_rows

    def assemble(blocks, rows: int):
        if not blocks:
            return None
        r = np.concatenate([b[0] for b in blocks])
        k = np.concatenate([b[1] for b in blocks])
        v = np.concatenate([b[2] for b in blocks])
        return sparse.csr_matrix((v, (r, k)), shape=(rows, total))

    res = optimize.linprog(
        c,
        A_eq=assemble(eq_blocks, row_eq),
        b_eq=np.concatenate(eq_rhs) if eq_rhs else None,
        A_ub=assemble(ub_blocks, row_ub),
        b_ub=np.concatenate(ub_rhs) if ub_rhs else None,
        bounds=[(0.0, None if math.isinf(u) else u) for u in upper],
        method="highs",
    )
    if res.status != 0:
        raise FeasibilityViolationError(f"extensive-form LP not solved: {res.message}")
    logger.debug(f"Extensive form: {total} variables, {row_eq + row_ub} rows, value {res.fun:.10g}")
    return float(res.fun)


# ============== Verification report ==============

@dataclass
class OracleComparison:
    oracle: str
    oracle_value: Optional[float]
    lower_bound: float
    upper_bound: float
    tolerance: float
    passed: Optional[bool]
    mode: str = "equal"
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "oracle": self.oracle,
            "oracle_value": self.oracle_value,
            "z_L": self.lower_bound,
            "z_U": self.upper_bound,
            "tolerance": self.tolerance,
            "mode": self.mode,
            "status": "SKIPPED" if self.passed is None else ("PASS" if self.passed else "FAIL"),
            "detail": self.detail,
        }


@dataclass
class VerifyReport:
    comparisons: list[OracleComparison] = field(default_factory=list)
    bound_discipline: bool = True
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.bound_discipline and all(c.passed is not False for c in self.comparisons)


def compare_to_oracle(
    name: str,
    oracle_value: float,
    lower_bound: float,
    upper_bound: float,
    tolerance: float,
    mode: str = "equal",
) -> OracleComparison:
    """
    PASS when z_L ≤ oracle + slack and, for "equal" comparisons, also
    oracle ≤ z_U + slack and |z_U − oracle| ≤ slack; "lower" comparisons
    only require oracle ≤ z_U + slack. slack = tolerance·max(1, |oracle|).
    """
    slack = tolerance * max(1.0, abs(oracle_value))
    if mode == "equal":
        checks = [
            (lower_bound <= oracle_value + slack, "z_L exceeds the oracle value"),
            (oracle_value <= upper_bound + slack, "oracle value exceeds z_U"),
            (abs(upper_bound - oracle_value) <= slack, "z_U differs from the oracle value"),
        ]
    else:
        checks = [(oracle_value <= upper_bound + slack, "oracle value exceeds z_U")]
    failures = [message for ok, message in checks if not ok]
    return OracleComparison(
        oracle=name,
        oracle_value=oracle_value,
        lower_bound=lower_bound,
        upper_bound=upper_bound,
        tolerance=tolerance,
        passed=not failures,
        mode=mode,
        detail="; ".join(failures),
    )


def bound_discipline(history: Sequence[Any], reference: Optional[float] = None, slack: float = 0.0) -> list[str]:
    """Monotone bound traces and, given a reference optimum, z_L ≤ z* ≤ z_U at every iteration."""
    problems = []
    for prev, cur in zip(history, history[1:]):
        if cur.lower_bound < prev.lower_bound:
            problems.append(f"z_L decreased at iteration {cur.iteration}")
        if cur.upper_bound > prev.upper_bound:
            problems.append(f"z_U increased at iteration {cur.iteration}")
    if reference is not None:
        for record in history:
            if record.lower_bound > reference + slack:
                problems.append(f"z_L above the oracle value at iteration {record.iteration}")
            if record.upper_bound < reference - slack:
                problems.append(f"z_U below the oracle value at iteration {record.iteration}")
    return problems


def root_inner_max(
    tree: ScenarioTree,
    spec: DivergenceSpec,
    state: Any,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> OracleComparison:
    """
    Root stage cost plus the primal worst-case expectation of the incumbent's
    child recourse values. Any distribution in the ball gives at most z_U.
    """
    root = tree.root.id
    children = tree.children(root)
    if not state.incumbent or not children:
        raise InputError("no incumbent policy to evaluate")
    values = np.array([state.recourse_values[c] for c in children], dtype=float)
    if not np.all(np.isfinite(values)):
        raise InputError("incumbent recourse values are not finite")
    prob = InnerMaxProblem(values, tree.descendant_probabilities(root), tree.rho_for(root), spec)
    value = state.incumbent[root].stage_cost + inner_max_primal(prob, seed=seed).value
    return compare_to_oracle("root_inner_max", value, state.lower_bound, state.upper_bound, tolerance, mode="lower")


def verify(
    tree: ScenarioTree,
    spec: DivergenceSpec,
    state: Any,
    tolerance: float = 1e-4,
    grid: Optional[GridSpec] = None,
    node_cap: int = EXTENSIVE_NODE_CAP,
    seed: int = 0,
) -> VerifyReport:
    """Compare a finished engine run against every oracle that applies to the instance."""
    report = VerifyReport()
    reference: Optional[float] = None
    z_L, z_U = state.lower_bound, state.upper_bound

    try:
        result = two_stage_grid(tree, spec, grid)
        reference = result.value
        comparison = compare_to_oracle("two_stage_grid", result.value, z_L, z_U, tolerance)
        comparison.detail = "; ".join(
            part for part in (comparison.detail, f"grid resolution {result.resolution:.3g}") if part
        )
        report.comparisons.append(comparison)
    except (OracleSizeError, InputError) as e:
        report.comparisons.append(
            OracleComparison("two_stage_grid", None, z_L, z_U, tolerance, None, detail=f"skipped: {e.detail}")
        )

    try:
        value = risk_neutral_extensive(tree, node_cap)
        neutral = max(tree.rho_for(n) for n in tree.interior_nodes()) <= RISK_NEUTRAL_RHO
        mode = "equal" if neutral else "lower"
        report.comparisons.append(compare_to_oracle("risk_neutral_extensive", value, z_L, z_U, tolerance, mode))
        if neutral and reference is None:
            reference = value
    except OracleSizeError as e:
        report.comparisons.append(
            OracleComparison("risk_neutral_extensive", None, z_L, z_U, tolerance, None, detail=f"skipped: {e.detail}")
        )

    try:
        report.comparisons.append(root_inner_max(tree, spec, state, tolerance, seed))
    except (OracleSizeError, InputError) as e:
        report.comparisons.append(
            OracleComparison("root_inner_max", None, z_L, z_U, tolerance, None, detail=f"skipped: {e.detail}")
        )

    slack = tolerance * max(1.0, abs(reference)) if reference is not None else 0.0
    problems = bound_discipline(state.history, reference, slack)
    if not state.converged:
        problems.append("run did not converge to the requested gap")
    report.bound_discipline = not problems
    report.detail = "; ".join(problems)
    for c in report.comparisons:
        logger.info(f"verify {c.oracle}: {c.to_dict()['status']} oracle={c.oracle_value} z_L={c.lower_bound:.10g} z_U={c.upper_bound:.10g}")
    return report

