from datetime import datetime
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field


RESULTS_FORMAT_VERSION = 1


# ============== Shared ==============

class DocumentHeader(BaseModel):
    """Run-dependent fields (timestamps, timings) kept apart from the reproducible body."""
    created_at: datetime
    engine_version: str
    elapsed_seconds: float


class IterationEntry(BaseModel):
    """Bounds after one iteration; wall times live in the iteration log only."""
    iter: int
    z_L: Optional[float]
    z_U: Optional[float]
    gap: Optional[float]
    opt_cuts: int
    feas_cuts: int


# ============== Results Schemas ==============

class NodePolicyEntry(BaseModel):
    """Incumbent decision at one node."""
    node: int
    stage: int
    x: list[float]
    stage_cost: float
    recourse: float
    lam: Optional[float] = None
    mu: Optional[float] = None
    mu_bar: Optional[float] = None
    lambda_zero: bool = False


class WorstCaseEntry(BaseModel):
    """Recovered worst-case conditional distribution with its residuals."""
    node: int
    descendants: list[int]
    nominal: list[float]
    probabilities: list[float]
    sum_residual: float  # |Σp − 1|
    divergence_residual: float  # I_φ(p, q) − ρ
    degenerate: bool = False


class ResultsBody(BaseModel):
    """Reproducible part of a solve result."""
    version: int = RESULTS_FORMAT_VERSION
    instance: Optional[str] = None
    divergence: str
    layout: Literal["single", "multi"]
    rho: list[float]
    tol: float
    secondary_tol: Optional[float] = None
    seed: int  # randomized oracle draws
    status: Literal["running", "converged", "max_iter", "stalled"]
    converged: bool
    iterations: int
    lower_bound: Optional[float]
    upper_bound: Optional[float]
    gap: Optional[float]
    optimality_cuts: int
    feasibility_cuts: int
    max_sum_residual: Optional[float] = None
    max_divergence_residual: Optional[float] = None
    history: list[IterationEntry] = Field(default_factory=list)
    policy: list[NodePolicyEntry] = Field(default_factory=list)
    worst_case: list[WorstCaseEntry] = Field(default_factory=list)


class ResultsDocument(BaseModel):
    """Solve result document."""
    header: DocumentHeader
    body: ResultsBody


# ============== Verify Schemas ==============

class ComparisonEntry(BaseModel):
    """Engine bounds next to one oracle value."""
    oracle: str
    oracle_value: Optional[float]
    z_L: Optional[float]
    z_U: Optional[float]
    tolerance: float
    mode: Literal["equal", "lower"]
    status: Literal["PASS", "FAIL", "SKIPPED"]
    detail: str = ""


class VerifyBody(BaseModel):
    """Reproducible part of an oracle comparison report."""
    version: int = RESULTS_FORMAT_VERSION
    instance: Optional[str] = None
    divergence: str
    seed: int
    status: Literal["PASS", "FAIL"]
    engine_status: str
    iterations: int
    bound_discipline: bool
    detail: str = ""
    comparisons: list[ComparisonEntry] = Field(default_factory=list)


class VerifyDocument(BaseModel):
    """Oracle comparison report."""
    header: DocumentHeader
    body: VerifyBody


# ============== Diagnostics ==============

class DiagnosticsDocument(BaseModel):
    """Written when a run stops without converging."""
    status: str
    last_iterations: list[dict[str, Any]] = Field(default_factory=list)
    nodes: list[dict[str, Any]] = Field(default_factory=list)
