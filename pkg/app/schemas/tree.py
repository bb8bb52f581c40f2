from typing import Optional

from pydantic import BaseModel, Field


TREE_FORMAT_VERSION = 1


# ============== Stage Data Schemas ==============

class StageDataDocument(BaseModel):
    """
    Generic stage LP blocks: A·x = B·x_prev + b, A_ub·x ≤ B_ub·x_prev + b_ub.

    Rows are lists of floats. `ub` entries set to null mean +∞.
    """
    A: list[list[float]]
    B: list[list[float]]
    b: list[float]
    c: list[float]
    A_ub: Optional[list[list[float]]] = None
    B_ub: Optional[list[list[float]]] = None
    b_ub: Optional[list[float]] = None
    ub: Optional[list[Optional[float]]] = None
    columns: Optional[list[str]] = None


# ============== Tree Schemas ==============

class TreeNodeDocument(BaseModel):
    """One node of the tree file."""
    id: int = Field(..., ge=0)
    stage: int = Field(..., ge=1)
    ancestor: Optional[int] = None
    q: float
    data: Optional[str] = None
    rho: Optional[float] = None


class TreeDocument(BaseModel):
    """Scenario tree file: stages, per-stage radii, nodes and stage data."""
    version: int = TREE_FORMAT_VERSION
    name: Optional[str] = None
    stages: int = Field(..., ge=1)
    rho: list[float]
    initial_cut_bound: float = 0.0
    allow_zero_probability: bool = False
    nodes: list[TreeNodeDocument]
    stage_data: dict[str, StageDataDocument] = Field(default_factory=dict)
