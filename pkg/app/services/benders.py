"""
Nested Benders decomposition for multistage φ-divergence DRO.

Each iteration runs:
    1. a forward pass solving every node LP at its ancestor's decision,
       which yields the lower bound from the root objective;
    2. an upper bound by backward recursion over the forward iterate,
       repairing μ where the conjugate-domain constraint is violated;
    3. the stopping test (relative gap, optional probability residuals);
    4. a backward pass adding feasibility and optimality cuts stage by
       stage and re-solving the nodes of stages 2..T-1.

When the loop ends the incumbent's worst-case distributions are
recomputed from the exact inner dual of each interior node.

Node solves within a stage may run on a thread pool; results and cut
insertions are ordered by node id so runs are schedule-independent.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np

from app.config import Settings
from app.core.exceptions import (
    FeasibilityViolationError,
    InputError,
    LogicError,
)
from app.services.divergence import (
    INF,
    DivergenceKind,
    DivergenceSpec,
    argmax_distribution,
    conjugate_array,
    conjugate_grad_array,
    divergence,
    dual_worst_case,
    inner_dual_objective,
    optimal_mu,
)
from app.services.lp_backend import Basis, LpBackend, get_backend
from app.services.scenario_tree import ScenarioTree, ensure_valid
from app.services.subproblem import (
    Cut,
    CutKind,
    CutLayout,
    NodeSolution,
    NodeSubproblem,
    assemble,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")


class SolveStatus(str, Enum):
    RUNNING = "running"
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    STALLED = "stalled"


class SecondaryScope(str, Enum):
    ROOT = "root"
    ALL = "all"


# ============== Options ==============

@dataclass
class SolverOptions:
    layout: CutLayout = CutLayout.SINGLE
    tol: float = 1e-3
    secondary_tol: Optional[float] = None
    secondary_scope: SecondaryScope = SecondaryScope.ROOT
    epsilon: float = 1e-3
    lambda_min: float = 1e-5
    max_iter: int = 500
    stall_iterations: int = 200
    threads: int = 1
    max_cuts_per_node: int = 100_000
    cut_slope_cap: float = 1e3
    cut_fault: float = 0.0
    absolute_gap: float = 1e-9

    def __post_init__(self):
        self.layout = CutLayout(self.layout)
        self.secondary_scope = SecondaryScope(self.secondary_scope)
        if not self.tol > 0:
            raise InputError(f"tol must be positive, got {self.tol}")
        if self.secondary_tol is not None and not self.secondary_tol > 0:
            raise InputError(f"secondary tol must be positive, got {self.secondary_tol}")
        if not 0.0 <= self.epsilon < 1.0:
            raise InputError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.lambda_min > 0:
            raise InputError(f"lambda_min must be positive, got {self.lambda_min}")
        if self.max_iter < 1:
            raise InputError(f"max_iter must be >= 1, got {self.max_iter}")

    @classmethod
    def from_settings(cls, settings: Settings, **overrides: Any) -> "SolverOptions":
        values = dict(
            tol=settings.tol,
            secondary_tol=settings.secondary_tol,
            epsilon=settings.epsilon,
            lambda_min=settings.lambda_min,
            max_iter=settings.max_iter,
            stall_iterations=settings.stall_iterations,
            threads=settings.resolved_threads,
            max_cuts_per_node=settings.max_cuts_per_node,
            cut_slope_cap=settings.cut_slope_cap,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


# ============== State records ==============

@dataclass
class IterationRecord:
    iteration: int
    lower_bound: float
    upper_bound: float
    gap: float
    optimality_cuts: int
    feasibility_cuts: int
    wall_time: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "iter": self.iteration,
            "z_L": self.lower_bound,
            "z_U": self.upper_bound,
            "gap": self.gap,
            "opt_cuts": self.optimality_cuts,
            "feas_cuts": self.feasibility_cuts,
            "wall_time": self.wall_time,
        }


@dataclass
class NodePolicy:
    node_id: int
    x: np.ndarray
    stage_cost: float
    recourse: float
    lam: Optional[float] = None
    mu: Optional[float] = None
    mu_bar: Optional[float] = None
    lambda_zero: bool = False


@dataclass
class WorstCase:
    """Recovered worst-case conditional distribution at an interior node."""

    node_id: int
    descendants: tuple[int, ...]
    probabilities: np.ndarray
    sum_residual: float
    divergence_residual: float
    degenerate: bool = False


@dataclass
class SolveState:
    lower_bound: float = -INF
    upper_bound: float = INF
    iteration: int = 0
    status: SolveStatus = SolveStatus.RUNNING
    recourse_values: dict[int, float] = field(default_factory=dict)
    incumbent: dict[int, NodePolicy] = field(default_factory=dict)
    mu_bar: dict[int, float] = field(default_factory=dict)
    worst_case: dict[int, WorstCase] = field(default_factory=dict)
    history: list[IterationRecord] = field(default_factory=list)
    optimality_cuts: int = 0
    feasibility_cuts: int = 0
    elapsed: float = 0.0
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    @property
    def gap(self) -> float:
        """Relative gap (z_U − z_L)/min(|z_U|, |z_L|)."""
        return relative_gap(self.lower_bound, self.upper_bound)


def relative_gap(lower: float, upper: float) -> float:
    if math.isinf(lower) or math.isinf(upper):
        return INF
    scale = min(abs(upper), abs(lower))
    diff = upper - lower
    if scale == 0:
        return 0.0 if abs(diff) <= 1e-12 else INF
    return diff / scale


# ============== Cut formulas ==============

@dataclass(frozen=True)
class CutContext:
    """A parent iterate (x̂, λ̂, μ̂) together with its descendants' LP results."""

    node_id: int
    descendants: tuple[int, ...]
    values: np.ndarray
    pi_B: np.ndarray
    q: np.ndarray
    rho: float
    x: np.ndarray
    lam: float
    mu: float

    @property
    def s_hat(self) -> np.ndarray:
        return (self.values - self.mu) / self.lam

    @property
    def point(self) -> np.ndarray:
        return np.concatenate([self.x, [self.lam, self.mu]])

    def inner_value(self, spec: DivergenceSpec) -> float:
        """μ + ρλ + λ·Σ q φ*(ŝ)."""
        return inner_dual_objective(spec, self.values, self.q, self.rho, self.lam, self.mu)


def optimality_cut(
    spec: DivergenceSpec,
    ctx: CutContext,
    layout: CutLayout = CutLayout.SINGLE,
    iteration: int = 0,
    slope_cap: float = INF,
) -> list[Cut]:
    """
    Linearize μ + ρλ + λ·φ*((Q(x) − μ)/λ) around the context iterate.

    Per descendant, G = (φ*′(ŝ)·π̂B, ρ + φ*(ŝ) − φ*′(ŝ)·ŝ, 1 − φ*′(ŝ)) and
    g = μ̂ + λ̂ρ + λ̂φ*(ŝ) − G·(x̂, λ̂, μ̂). The single layout aggregates by q.
    When the conjugate is not finite or its slope exceeds `slope_cap`, the
    linearization point moves to μ*(λ̂), the best μ for the current λ̂.
    """
    if not ctx.lam > 0:
        raise LogicError(f"node {ctx.node_id}: optimality cuts need lambda > 0")
    s = ctx.s_hat
    if math.isfinite(spec.sbar) and np.any(s > spec.sbar):
        raise FeasibilityViolationError(
            f"node {ctx.node_id}: s_hat exceeds sbar; generate feasibility cuts and repair mu first"
        )
    conj = conjugate_array(spec, s)
    grad = conjugate_grad_array(spec, s)
    if not np.all(np.isfinite(conj)) or np.any(grad > slope_cap):
        mu = optimal_mu(spec, ctx.values, ctx.q, ctx.lam)
        logger.debug(f"Node {ctx.node_id}: relinearizing cut at mu={mu:.6g} (was {ctx.mu:.6g})")
        ctx = replace(ctx, mu=mu)
        s = ctx.s_hat
        conj = conjugate_array(spec, s)
        grad = conjugate_grad_array(spec, s)
        if not np.all(np.isfinite(conj)):
            raise FeasibilityViolationError(f"node {ctx.node_id}: no finite linearization point")

    point = ctx.point
    n_x = ctx.x.size
    gradients = np.empty((len(ctx.descendants), n_x + 2))
    gradients[:, :n_x] = grad[:, None] * ctx.pi_B
    gradients[:, n_x] = ctx.rho + conj - grad * s
    gradients[:, n_x + 1] = 1.0 - grad
    values = ctx.mu + ctx.lam * ctx.rho + ctx.lam * conj
    intercepts = values - gradients @ point

    if CutLayout(layout) is CutLayout.SINGLE:
        return [
            Cut(
                CutKind.OPTIMALITY,
                ctx.q @ gradients,
                float(ctx.q @ intercepts),
                ctx.node_id,
                iteration,
                sources=ctx.descendants,
                theta_index=0,
            )
        ]
    return [
        Cut(
            CutKind.OPTIMALITY,
            gradients[k].copy(),
            float(intercepts[k]),
            ctx.node_id,
            iteration,
            sources=(child,),
            theta_index=k,
        )
        for k, child in enumerate(ctx.descendants)
    ]


def feasibility_cut(spec: DivergenceSpec, ctx: CutContext, iteration: int = 0) -> list[Cut]:
    """
    One cut H·(x, λ, μ) + h ≤ 0 per descendant with ŝ > s̄, where
    H = (π̂B, −s̄, −1) and h = v̂ − π̂B·x̂.
    """
    sbar = spec.sbar
    if not math.isfinite(sbar):
        raise LogicError(f"{spec.name} has no conjugate-domain bound; feasibility cuts do not apply")
    cuts = []
    for k in np.flatnonzero(ctx.s_hat > sbar):
        gradient = np.concatenate([ctx.pi_B[k], [-sbar, -1.0]])
        intercept = float(ctx.values[k] - ctx.pi_B[k] @ ctx.x)
        cuts.append(
            Cut(CutKind.FEASIBILITY, gradient, intercept, ctx.node_id, iteration, sources=(ctx.descendants[k],))
        )
    return cuts


def _repair_mu(values: np.ndarray, mu: float, lam: float, sbar: float, epsilon: float) -> float:
    if not lam > 0:
        raise LogicError("mu repair needs lambda > 0; lambda = 0 is evaluated separately")
    if not math.isfinite(sbar):
        raise LogicError("mu repair only applies to a finite sbar")
    if not 0.0 <= epsilon < 1.0:
        raise InputError(f"epsilon must lie in [0, 1), got {epsilon}")
    values = np.asarray(values, dtype=float)
    top = float(values.max())
    if (top - mu) / lam <= sbar:
        return mu
    repaired = top - sbar * lam * (1.0 - epsilon)
    if (top - repaired) / lam >= sbar:
        raise FeasibilityViolationError(
            f"repaired ratio {(top - repaired) / lam:.12g} still reaches sbar={sbar}; epsilon must be positive"
        )
    return repaired


def repair_mu_true(values: Sequence[float], mu: float, lam: float, sbar: float, epsilon: float) -> float:
    """μ̄ ← max z − s̄·λ̂·(1−ε) when some (z − μ̄)/λ̂ exceeds s̄; otherwise μ̄ unchanged."""
    return _repair_mu(np.asarray(values, dtype=float), mu, lam, sbar, epsilon)


def repair_mu_approx(values: Sequence[float], mu: float, lam: float, sbar: float, epsilon: float) -> float:
    """Same repair on descendant LP values c·x̂ + θ̂ (θ̂ ≡ 0 at the last stage)."""
    return _repair_mu(np.asarray(values, dtype=float), mu, lam, sbar, epsilon)


# ============== Upper bound and recovery ==============

@dataclass
class UpperBound:
    value: float
    recourse: dict[int, float]
    mu_bar: dict[int, float]
    lambda_zero: set[int]


def _at_lambda_min(lam: float, lambda_min: float) -> bool:
    return lam <= lambda_min * (1.0 + 1e-9)


def upper_bound(
    tree: ScenarioTree,
    solutions: dict[int, NodeSolution],
    spec: DivergenceSpec,
    epsilon: float = 1e-3,
    lambda_min: float = 1e-5,
) -> UpperBound:
    """
    Evaluate the forward iterate's policy bottom-up:
    z_T = c·x̂ and z_t = c·x̂ + μ̄ + ρλ̂ + λ̂·Σ q φ*((z_{t+1} − μ̄)/λ̂),
    using the λ = 0 value c·x̂ + max z_{t+1} when it is smaller and λ̂ sits
    at its lower bound, or when the conjugate term overflows.
    """
    recourse: dict[int, float] = {}
    mu_bar: dict[int, float] = {}
    lambda_zero: set[int] = set()
    sbar = spec.sbar

    for t in range(tree.stage_count, 0, -1):
        for node_id in tree.nodes_at(t):
            sol = solutions[node_id]
            children = tree.children(node_id)
            if not children:
                recourse[node_id] = sol.stage_cost
                continue
            z = np.array([recourse[c] for c in children])
            q = tree.descendant_probabilities(node_id)
            lam, mu = sol.lam, sol.mu
            if np.any(np.isinf(z)):
                recourse[node_id] = INF
                mu_bar[node_id] = mu
                continue
            if math.isfinite(sbar) and float(np.max((z - mu) / lam)) > sbar:
                mu = repair_mu_true(z, mu, lam, sbar, epsilon)
                logger.debug(f"Node {node_id}: upper-bound mu repaired to {mu:.6g}")
            value = sol.stage_cost + inner_dual_objective(spec, z, q, tree.rho_for(node_id), lam, mu)
            if _at_lambda_min(lam, lambda_min) or math.isinf(value):
                zero_value = sol.stage_cost + float(z.max())
                if zero_value <= value:
                    value = zero_value
                    lambda_zero.add(node_id)
                    logger.debug(f"Node {node_id}: lambda=0 candidate taken ({zero_value:.6g})")
            recourse[node_id] = value
            mu_bar[node_id] = mu

    return UpperBound(recourse[tree.root.id], recourse, mu_bar, lambda_zero)


def recover_worst_case(
    spec: DivergenceSpec,
    values: Sequence[float],
    q: Sequence[float],
    lam: float,
    mu: float,
    rho: float,
    lambda_min: float = 1e-5,
    node_id: int = -1,
    descendants: Sequence[int] = (),
) -> WorstCase:
    """
    p = q ⊙ φ*′((Q − μ̂)/λ̂) with residuals |Σp − 1| and I_φ(p, q) − ρ.

    At λ̂ = λ_min the mass is spread uniformly over the argmax descendants
    and the result is flagged degenerate. The interval divergence takes
    its worst case directly: every ratio at 1−κ, the remaining mass on
    the largest values up to the upper ratio.
    """
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    descendants = tuple(descendants) or tuple(range(v.size))

    if spec.kind is DivergenceKind.INTERVAL_CVAR:
        p, _ = dual_worst_case(spec, v, q, rho)
        degenerate = False
    elif _at_lambda_min(lam, lambda_min):
        p = argmax_distribution(v)
        degenerate = True
    else:
        s = (v - mu) / lam
        if math.isfinite(spec.sbar) and np.any(s >= spec.sbar):
            raise FeasibilityViolationError(
                f"node {node_id}: ratio {float(s.max()):.6g} reaches sbar={spec.sbar}"
            )
        p = q * conjugate_grad_array(spec, s)
        degenerate = False

    return _worst_case(spec, p, q, rho, node_id, descendants, degenerate)


def refine_worst_case(
    spec: DivergenceSpec,
    values: Sequence[float],
    q: Sequence[float],
    rho: float,
    lam_hint: Optional[float] = None,
    node_id: int = -1,
    descendants: Sequence[int] = (),
) -> WorstCase:
    """Worst case from the exact inner dual of the node's recourse values; degenerate when λ* = 0."""
    v = np.asarray(values, dtype=float)
    q = np.asarray(q, dtype=float)
    descendants = tuple(descendants) or tuple(range(v.size))
    p, lam = dual_worst_case(spec, v, q, rho, lam_hint)
    degenerate = lam == 0.0 and spec.kind is not DivergenceKind.INTERVAL_CVAR and float(v.max() - v.min()) > 0.0
    return _worst_case(spec, p, q, rho, node_id, descendants, degenerate)


def _worst_case(
    spec: DivergenceSpec,
    p: np.ndarray,
    q: np.ndarray,
    rho: float,
    node_id: int,
    descendants: tuple[int, ...],
    degenerate: bool,
) -> WorstCase:
    return WorstCase(
        node_id=node_id,
        descendants=descendants,
        probabilities=p,
        sum_residual=abs(float(p.sum()) - 1.0),
        divergence_residual=divergence(spec, p, q) - rho,
        degenerate=degenerate,
    )


# ============== Driver ==============

class NestedBenders:
    """Algorithm driver over a validated scenario tree."""

    def __init__(
        self,
        tree: ScenarioTree,
        spec: DivergenceSpec,
        options: Optional[SolverOptions] = None,
        backend: Optional[LpBackend] = None,
    ):
        ensure_valid(tree)
        self.tree = tree
        self.spec = spec
        self.options = options or SolverOptions()
        self.backend = backend or get_backend("bundled")
        self.subproblems: dict[int, NodeSubproblem] = {}
        for node in tree:
            children = tree.children(node.id)
            self.subproblems[node.id] = assemble(
                node.id,
                tree.data(node.id),
                len(children),
                self.options.layout,
                tree.initial_cut_bound,
                descendant_q=tree.descendant_probabilities(node.id) if children else None,
                lambda_min=self.options.lambda_min,
                rho=tree.rho_for(node.id) if children else 0.0,
                has_feasibility_pool=spec.has_feasibility_constraints,
                max_cuts=self.options.max_cuts_per_node,
            )
        self._executor: Optional[ThreadPoolExecutor] = None
        self._fault_pending = self.options.cut_fault != 0.0

    # ----- parallel helpers -----

    def _map(self, fn: Callable[[int], T], ids: Sequence[int]) -> list[T]:
        if self._executor is None or len(ids) < 2:
            return [fn(i) for i in ids]
        return list(self._executor.map(fn, ids))

    def _solve_nodes(self, ids: Sequence[int], solutions: dict[int, NodeSolution]) -> None:
        if not ids:
            return

        def parent_x(node_id: int) -> np.ndarray:
            ancestor = self.tree.node(node_id).ancestor_id
            return np.zeros(0) if ancestor is None else solutions[ancestor].x

        donor: Optional[Basis] = None
        first = ids[0]
        pending = list(ids)
        if self.subproblems[first].basis is None:
            solutions[first] = self.subproblems[first].solve(parent_x(first), self.backend)
            donor = solutions[first].basis
            pending = pending[1:]

        def work(node_id: int) -> NodeSolution:
            sub = self.subproblems[node_id]
            warm = donor if sub.basis is None else None
            return sub.solve(parent_x(node_id), self.backend, warm)

        for node_id, sol in zip(pending, self._map(work, pending)):
            solutions[node_id] = sol

    # ----- passes -----

    def forward_pass(self) -> dict[int, NodeSolution]:
        solutions: dict[int, NodeSolution] = {}
        for t in range(1, self.tree.stage_count + 1):
            self._solve_nodes(self.tree.nodes_at(t), solutions)
        return solutions

    def cut_context(self, node_id: int, solutions: dict[int, NodeSolution]) -> CutContext:
        sol = solutions[node_id]
        children = tuple(self.tree.children(node_id))
        return CutContext(
            node_id=node_id,
            descendants=children,
            values=np.array([solutions[c].objective for c in children]),
            pi_B=np.vstack([solutions[c].pi_B for c in children]),
            q=self.tree.descendant_probabilities(node_id),
            rho=self.tree.rho_for(node_id),
            x=sol.x,
            lam=sol.lam,
            mu=sol.mu,
        )

    def generate_cuts(self, node_id: int, solutions: dict[int, NodeSolution], iteration: int) -> list[Cut]:
        ctx = self.cut_context(node_id, solutions)
        cuts: list[Cut] = []
        if self.spec.has_feasibility_constraints and float(ctx.s_hat.max()) > self.spec.sbar:
            cuts.extend(feasibility_cut(self.spec, ctx, iteration))
            mu = repair_mu_approx(ctx.values, ctx.mu, ctx.lam, self.spec.sbar, self.options.epsilon)
            logger.debug(f"Node {node_id}: {len(cuts)} feasibility cuts, mu repaired to {mu:.6g}")
            ctx = replace(ctx, mu=mu)
        cuts.extend(
            optimality_cut(self.spec, ctx, self.options.layout, iteration, self.options.cut_slope_cap)
        )
        return cuts

    def backward_pass(self, solutions: dict[int, NodeSolution], iteration: int) -> tuple[int, int]:
        added_opt = added_feas = 0
        for t in range(self.tree.stage_count - 1, 0, -1):
            ids = self.tree.nodes_at(t)
            batches = self._map(lambda nid: self.generate_cuts(nid, solutions, iteration), ids)
            for node_id, cuts in zip(ids, batches):
                sub = self.subproblems[node_id]
                for cut in cuts:
                    if cut.kind is CutKind.OPTIMALITY and self._fault_pending:
                        cut = replace(cut, intercept=cut.intercept + self.options.cut_fault)
                        self._fault_pending = False
                        logger.warning(f"Injected cut fault of {self.options.cut_fault:g} at node {node_id}")
                    if sub.add_cut(cut):
                        if cut.kind is CutKind.OPTIMALITY:
                            added_opt += 1
                        else:
                            added_feas += 1
            if t > 1:
                self._solve_nodes(ids, solutions)
        return added_opt, added_feas

    # ----- bookkeeping -----

    def _worst_cases(
        self, solutions: dict[int, NodeSolution], bound: UpperBound, node_ids: Iterable[int]
    ) -> dict[int, WorstCase]:
        result = {}
        for node_id in node_ids:
            children = self.tree.children(node_id)
            sol = solutions[node_id]
            result[node_id] = recover_worst_case(
                self.spec,
                [bound.recourse[c] for c in children],
                self.tree.descendant_probabilities(node_id),
                sol.lam,
                bound.mu_bar[node_id],
                self.tree.rho_for(node_id),
                lambda_min=self.options.lambda_min,
                node_id=node_id,
                descendants=children,
            )
        return result

    def _record_incumbent(self, state: SolveState, solutions: dict[int, NodeSolution], bound: UpperBound):
        state.upper_bound = bound.value
        state.recourse_values = dict(bound.recourse)
        state.mu_bar = dict(bound.mu_bar)
        state.incumbent = {
            node_id: NodePolicy(
                node_id=node_id,
                x=sol.x.copy(),
                stage_cost=sol.stage_cost,
                recourse=bound.recourse[node_id],
                lam=sol.lam,
                mu=sol.mu,
                mu_bar=bound.mu_bar.get(node_id),
                lambda_zero=node_id in bound.lambda_zero,
            )
            for node_id, sol in solutions.items()
        }
        try:
            state.worst_case = self._worst_cases(solutions, bound, self.tree.interior_nodes())
        except FeasibilityViolationError as e:
            logger.warning(f"Worst-case recovery skipped: {e.detail}")
            state.worst_case = {}

    def _refined_worst_cases(self, state: SolveState) -> dict[int, WorstCase]:
        result = {}
        for node_id in self.tree.interior_nodes():
            children = self.tree.children(node_id)
            result[node_id] = refine_worst_case(
                self.spec,
                [state.recourse_values[c] for c in children],
                self.tree.descendant_probabilities(node_id),
                self.tree.rho_for(node_id),
                lam_hint=state.incumbent[node_id].lam,
                node_id=node_id,
                descendants=children,
            )
        return result

    def _secondary_ok(self, state: SolveState) -> bool:
        """Residual test on the incumbent's recovered distributions."""
        tol = self.options.secondary_tol
        if tol is None:
            return True
        if math.isinf(state.upper_bound):
            return False
        scope = (
            [self.tree.root.id]
            if self.options.secondary_scope is SecondaryScope.ROOT
            else self.tree.interior_nodes()
        )
        cases = [state.worst_case.get(node_id) for node_id in scope]
        return all(case is not None and case.sum_residual <= tol for case in cases)

    def _stall_dump(self, state: SolveState, solutions: dict[int, NodeSolution]) -> dict[str, Any]:
        return {
            "last_iterations": [r.to_dict() for r in state.history[-10:]],
            "nodes": [
                {
                    "node": node_id,
                    "lambda": solutions[node_id].lam,
                    "mu": solutions[node_id].mu,
                    "optimality_cuts": len(self.subproblems[node_id].optimality_cuts),
                    "feasibility_cuts": len(self.subproblems[node_id].feasibility_cuts),
                }
                for node_id in self.tree.interior_nodes()
            ],
        }

    # ----- main loop -----

    def run(self) -> SolveState:
        opts = self.options
        state = SolveState()
        started = time.perf_counter()
        last_improvement = 0
        root_id = self.tree.root.id

        executor = ThreadPoolExecutor(max_workers=opts.threads) if opts.threads > 1 else None
        self._executor = executor
        try:
            for iteration in range(1, opts.max_iter + 1):
                state.iteration = iteration
                solutions = self.forward_pass()
                state.lower_bound = max(state.lower_bound, solutions[root_id].objective)

                bound = upper_bound(self.tree, solutions, self.spec, opts.epsilon, opts.lambda_min)
                if bound.value < state.upper_bound:
                    self._record_incumbent(state, solutions, bound)
                    last_improvement = iteration

                gap_abs = state.upper_bound - state.lower_bound
                scale = min(abs(state.upper_bound), abs(state.lower_bound))
                gap_ok = gap_abs <= opts.tol * scale or gap_abs <= opts.absolute_gap
                converged = gap_ok and self._secondary_ok(state)

                record = IterationRecord(
                    iteration=iteration,
                    lower_bound=state.lower_bound,
                    upper_bound=state.upper_bound,
                    gap=state.gap,
                    optimality_cuts=state.optimality_cuts,
                    feasibility_cuts=state.feasibility_cuts,
                    wall_time=time.perf_counter() - started,
                )
                state.history.append(record)
                logger.info(
                    f"iter={iteration} z_L={record.lower_bound:.8g} z_U={record.upper_bound:.8g} "
                    f"gap={record.gap:.3e} opt_cuts={record.optimality_cuts} "
                    f"feas_cuts={record.feasibility_cuts} time={record.wall_time:.2f}s"
                )

                if converged:
                    state.status = SolveStatus.CONVERGED
                    break
                if iteration - last_improvement >= opts.stall_iterations:
                    state.status = SolveStatus.STALLED
                    state.diagnostics = self._stall_dump(state, solutions)
                    logger.warning(
                        f"Upper bound has not improved for {opts.stall_iterations} iterations; stopping"
                    )
                    break
                if iteration == opts.max_iter:
                    state.status = SolveStatus.MAX_ITER
                    logger.warning(f"Reached max_iter={opts.max_iter} with gap {state.gap:.3e}")
                    break

                added_opt, added_feas = self.backward_pass(solutions, iteration)
                state.optimality_cuts += added_opt
                state.feasibility_cuts += added_feas
        finally:
            self._executor = None
            if executor is not None:
                executor.shutdown()

        if state.incumbent:
            state.worst_case = self._refined_worst_cases(state)
        state.elapsed = time.perf_counter() - started
        return state


def run(
    tree: ScenarioTree,
    spec: DivergenceSpec,
    layout: CutLayout = CutLayout.SINGLE,
    tol: float = 1e-3,
    secondary_tol: Optional[float] = None,
    max_iter: int = 500,
    options: Optional[SolverOptions] = None,
    backend: Optional[LpBackend] = None,
) -> SolveState:
    """Solve the tree; `options`, when given, overrides the scalar arguments."""
    if options is None:
        options = SolverOptions(layout=layout, tol=tol, secondary_tol=secondary_tol, max_iter=max_iter)
    return NestedBenders(tree, spec, options, backend).run()
