"""
Per-node stage problem.

Column layout of an interior node: [x | λ | μ | θ_1..θ_k] where k = 1 in the
single-cut layout and k = |descendants| in the multi-cut layout (θ weighted
by q in the objective). Leaves carry only x.

Rows: structural A·x = B·x_prev + b and A_ub·x ≤ B_ub·x_prev + b_ub, then
the cut pool. An optimality cut θ ≥ G·(x, λ, μ) + g is stored as the row
G·(x, λ, μ) − θ ≤ −g; a feasibility cut 0 ≥ H·(x, λ, μ) + h as
H·(x, λ, μ) ≤ −h. The initial cut θ ≥ initial_cut_bound is an
iteration-0 optimality cut with zero gradient.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from app.core.exceptions import (
    CutPoolLimitError,
    InfeasibleNodeError,
    LogicError,
    LpSolverError,
    ShapeError,
)
from app.services.lp_backend import Basis, LinearProgram, LpBackend, LpStatus, solve_lp
from app.services.scenario_tree import StageData

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_MIN = 1e-5
DEFAULT_MAX_CUTS = 100_000


class CutKind(str, Enum):
    OPTIMALITY = "optimality"
    FEASIBILITY = "feasibility"


class CutLayout(str, Enum):
    SINGLE = "single"
    MULTI = "multi"


@dataclass(frozen=True)
class Cut:
    """
    An affine cut over (x, λ, μ).

    For optimality cuts `theta_index` names the θ column it bounds
    (always 0 in the single layout).
    """

    kind: CutKind
    gradient: np.ndarray
    intercept: float
    node_id: int
    iteration: int
    sources: tuple[int, ...] = ()
    theta_index: int = 0

    def value_at(self, point: np.ndarray) -> float:
        return float(self.gradient @ point) + self.intercept

    def key(self) -> tuple:
        return (self.kind, self.theta_index, self.gradient.tobytes(), self.intercept)

    def describe(self) -> str:
        grad = " ".join(f"{g:.12g}" for g in self.gradient)
        src = ",".join(str(s) for s in self.sources)
        return (
            f"{self.kind.value} node={self.node_id} iter={self.iteration} "
            f"theta={self.theta_index} sources=[{src}] grad=[{grad}] intercept={self.intercept:.12g}"
        )


@dataclass
class NodeSolution:
    """Optimal solution of one node LP at a given ancestor decision."""

    node_id: int
    x: np.ndarray
    objective: float
    stage_cost: float
    pi_eq: np.ndarray
    pi_ub: np.ndarray
    pi_B: np.ndarray
    lam: Optional[float] = None
    mu: Optional[float] = None
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basis: Optional[Basis] = None
    iterations: int = 0

    @property
    def point(self) -> np.ndarray:
        """(x̂, λ̂, μ̂), the argument of cuts."""
        return np.concatenate([self.x, [self.lam, self.mu]])

    @property
    def approximation(self) -> float:
        """Objective share carried by θ."""
        return self.objective - self.stage_cost


class NodeSubproblem:
    """Stage LP of one node with its growing optimality and feasibility cut pools."""

    def __init__(
        self,
        node_id: int,
        stage_data: StageData,
        n_descendants: int,
        descendant_q: Optional[np.ndarray] = None,
        layout: CutLayout = CutLayout.SINGLE,
        initial_cut_bound: float = 0.0,
        lambda_min: float = DEFAULT_LAMBDA_MIN,
        rho: float = 0.0,
        has_feasibility_pool: bool = True,
        max_cuts: int = DEFAULT_MAX_CUTS,
    ):
        self.node_id = node_id
        self.data = stage_data
        self.n_x = stage_data.n_vars
        self.is_leaf = n_descendants == 0
        self.layout = CutLayout(layout)
        self.lambda_min = lambda_min
        self.rho = rho
        self.initial_cut_bound = initial_cut_bound
        self.has_feasibility_pool = has_feasibility_pool
        self.max_cuts = max_cuts
        self.basis: Optional[Basis] = None

        if self.is_leaf:
            self.n_theta = 0
            self.q = np.zeros(0)
        else:
            self.n_theta = 1 if self.layout is CutLayout.SINGLE else n_descendants
            self.q = (
                np.full(n_descendants, 1.0 / n_descendants)
                if descendant_q is None
                else np.asarray(descendant_q, dtype=float)
            )
            if self.q.size != n_descendants:
                raise ShapeError(f"node {node_id}: {self.q.size} probabilities for {n_descendants} descendants")

        self.optimality_cuts: list[Cut] = []
        self.feasibility_cuts: list[Cut] = []
        self._keys: set[tuple] = set()
        self._add_initial_cuts()

    # ----- layout -----

    @property
    def n_cols(self) -> int:
        return self.n_x if self.is_leaf else self.n_x + 2 + self.n_theta

    @property
    def lambda_col(self) -> int:
        return self.n_x

    @property
    def mu_col(self) -> int:
        return self.n_x + 1

    def theta_col(self, index: int) -> int:
        return self.n_x + 2 + index

    @property
    def cut_count(self) -> int:
        return len(self.optimality_cuts) + len(self.feasibility_cuts)

    # ----- cut pools -----

    def _add_initial_cuts(self):
        if self.is_leaf:
            return
        zero = np.zeros(self.n_x + 2)
        for k in range(self.n_theta):
            self.add_cut(
                Cut(CutKind.OPTIMALITY, zero, self.initial_cut_bound, self.node_id, 0, theta_index=k)
            )

    def add_cut(self, cut: Cut) -> bool:
        """Append a cut; exact duplicates are ignored. Returns whether it was added."""
        if self.is_leaf:
            raise LogicError(f"node {self.node_id} is a leaf and carries no cuts")
        if cut.gradient.size != self.n_x + 2:
            raise ShapeError(
                f"cut gradient has {cut.gradient.size} entries, node {self.node_id} expects {self.n_x + 2}"
            )
        if cut.kind is CutKind.FEASIBILITY and not self.has_feasibility_pool:
            raise LogicError(f"node {self.node_id} has no feasibility pool (sbar is infinite)")
        if cut.kind is CutKind.OPTIMALITY and not 0 <= cut.theta_index < self.n_theta:
            raise ShapeError(f"theta index {cut.theta_index} out of range")

        key = cut.key()
        if key in self._keys:
            return False
        if self.cut_count >= self.max_cuts:
            raise CutPoolLimitError(f"node {self.node_id} reached the cap of {self.max_cuts} cuts")
        self._keys.add(key)
        if cut.kind is CutKind.OPTIMALITY:
            self.optimality_cuts.append(cut)
        else:
            self.feasibility_cuts.append(cut)
        return True

    def set_rho(self, rho: float):
        """Change ρ; every pooled cut was built for the old radius and is dropped."""
        if rho == self.rho:
            return
        self.rho = rho
        self.optimality_cuts.clear()
        self.feasibility_cuts.clear()
        self._keys.clear()
        self.basis = None
        self._add_initial_cuts()

    def dump_cuts(self) -> str:
        """One cut per line: kind, node, iteration, gradient, intercept."""
        return "\n".join(c.describe() for c in self.optimality_cuts + self.feasibility_cuts)

    # ----- LP assembly -----

    def build_lp(self, x_prev: np.ndarray) -> LinearProgram:
        data = self.data
        n, n_cols = self.n_x, self.n_cols
        c = np.zeros(n_cols)
        c[:n] = data.c
        if not self.is_leaf:
            if self.layout is CutLayout.SINGLE:
                c[self.theta_col(0)] = 1.0
            else:
                c[self.theta_col(0):] = self.q

        A_eq = np.zeros((data.n_rows, n_cols))
        A_eq[:, :n] = data.A
        b_eq = data.rhs(x_prev)

        n_struct_ub = data.n_ub_rows
        n_cuts = len(self.optimality_cuts) + len(self.feasibility_cuts)
        A_ub = np.zeros((n_struct_ub + n_cuts, n_cols))
        b_ub = np.zeros(n_struct_ub + n_cuts)
        if n_struct_ub:
            A_ub[:n_struct_ub, :n] = data.A_ub
            b_ub[:n_struct_ub] = data.rhs_ub(x_prev)
        row = n_struct_ub
        for cut in self.optimality_cuts:
            A_ub[row, : n + 2] = cut.gradient
            A_ub[row, self.theta_col(cut.theta_index)] = -1.0
            b_ub[row] = -cut.intercept
            row += 1
        for cut in self.feasibility_cuts:
            A_ub[row, : n + 2] = cut.gradient
            b_ub[row] = -cut.intercept
            row += 1

        lb = np.zeros(n_cols)
        ub = np.full(n_cols, math.inf)
        ub[:n] = data.upper_bounds
        if not self.is_leaf:
            lb[self.lambda_col] = self.lambda_min
            lb[self.mu_col] = -math.inf
            lb[self.theta_col(0):] = -math.inf

        return LinearProgram(
            c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub, lb=lb, ub=ub,
            col_names=self._column_names(), name=f"node{self.node_id}",
        )

    def _column_names(self) -> list[str]:
        names = list(self.data.columns) if self.data.columns else [f"x{j}" for j in range(self.n_x)]
        if not self.is_leaf:
            names += ["lambda", "mu"] + [f"theta{k}" for k in range(self.n_theta)]
        return names

    # ----- solve -----

    def solve(
        self,
        x_prev: np.ndarray,
        backend: Optional[LpBackend] = None,
        warm_start: Optional[Basis] = None,
    ) -> NodeSolution:
        """
        Solve the node LP at right-hand side B·x_prev + b.

        Raises InfeasibleNodeError when the LP has no solution, which means
        the model lacks relatively complete recourse.
        """
        if self.data.n_prev and np.asarray(x_prev).size != self.data.n_prev:
            raise ShapeError(
                f"node {self.node_id}: ancestor decision has {np.asarray(x_prev).size} entries, expected {self.data.n_prev}"
            )
        lp = self.build_lp(x_prev)
        start = warm_start if warm_start is not None else self.basis
        try:
            result = solve_lp(lp, start, backend)
        except LpSolverError:
            if start is None:
                raise
            logger.debug(f"Node {self.node_id}: warm start failed, retrying cold")
            result = solve_lp(lp, None, backend)

        if result.status is LpStatus.INFEASIBLE:
            raise InfeasibleNodeError(
                f"node {self.node_id} LP is infeasible; the model lacks relatively complete recourse"
            )
        if result.status is LpStatus.UNBOUNDED:
            raise InfeasibleNodeError(
                f"node {self.node_id} LP is unbounded; an initial cut bound is required"
            )
        if result.basis is not None:
            self.basis = result.basis

        data = self.data
        n_struct_ub = data.n_ub_rows
        pi_eq = result.dual_eq
        pi_ub = result.dual_ub[:n_struct_ub]
        x = result.x[: self.n_x]
        stage_cost = float(data.c @ x)
        solution = NodeSolution(
            node_id=self.node_id,
            x=x,
            objective=result.objective,
            stage_cost=stage_cost,
            pi_eq=pi_eq,
            pi_ub=pi_ub,
            pi_B=data.coupling_gradient(pi_eq, pi_ub if n_struct_ub else None),
            basis=result.basis,
            iterations=result.iterations,
        )
        if not self.is_leaf:
            solution.lam = float(result.x[self.lambda_col])
            solution.mu = float(result.x[self.mu_col])
            solution.theta = result.x[self.theta_col(0):].copy()
        return solution


def assemble(
    node_id: int,
    stage_data: StageData,
    n_descendants: int,
    layout: CutLayout,
    initial_cut_bound: float,
    descendant_q: Optional[np.ndarray] = None,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    rho: float = 0.0,
    has_feasibility_pool: bool = True,
    max_cuts: int = DEFAULT_MAX_CUTS,
) -> NodeSubproblem:
    """Build the node subproblem with its initial cuts θ ≥ initial_cut_bound."""
    return NodeSubproblem(
        node_id,
        stage_data,
        n_descendants,
        descendant_q=descendant_q,
        layout=layout,
        initial_cut_bound=initial_cut_bound,
        lambda_min=lambda_min,
        rho=rho,
        has_feasibility_pool=has_feasibility_pool,
        max_cuts=max_cuts,
    )
