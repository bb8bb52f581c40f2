from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.schemas.tree import TreeDocument


# ============== Run Schemas ==============

class RunOptions(BaseModel):
    """Divergence, radii and solver knobs. Unset knobs fall back to the MDRO_ settings."""
    divergence: str = "kl"
    confidence: Optional[float] = Field(None, gt=0, lt=1)  # e.g. 0.95
    rho: Optional[list[float]] = None  # one value for every stage, or one per stage
    sample_size: Optional[int] = Field(None, ge=1)  # N in the calibration; defaults to the branch count
    layout: Literal["single", "multi"] = "single"
    tol: Optional[float] = Field(None, gt=0)
    secondary_tol: Optional[float] = Field(None, gt=0)
    secondary_scope: Literal["root", "all"] = "root"
    epsilon: Optional[float] = Field(None, ge=0, lt=1)
    lambda_min: Optional[float] = Field(None, gt=0)
    max_iter: Optional[int] = Field(None, ge=1)
    threads: Optional[int] = Field(None, ge=0)
    seed: Optional[int] = None
    backend: Optional[Literal["bundled", "highs"]] = None
    inject_cut_fault: float = 0.0

    @field_validator("rho")
    @classmethod
    def rho_not_empty(cls, v: Optional[list[float]]) -> Optional[list[float]]:
        if v is not None and not v:
            raise ValueError("rho needs at least one value")
        return v

    @model_validator(mode="after")
    def one_radius_source(self) -> "RunOptions":
        if (self.confidence is None) == (self.rho is None):
            raise ValueError("give exactly one of confidence or rho")
        if self.sample_size is not None and self.confidence is None:
            raise ValueError("sample_size only applies with confidence")
        return self


class RunConfig(RunOptions):
    """Command-line run: options plus the instance files and output directory."""
    tree: Optional[Path] = None
    network: Optional[Path] = None
    demands: Optional[Path] = None
    config: Literal["NI", "WWTP", "IPR"] = "NI"
    infrastructure: Optional[Path] = None  # InfrastructureDocument with capacity/cost overrides
    scale: str = "reduced:2"
    stages: int = Field(5, ge=2, le=5)
    periods: int = Field(8, ge=1)
    out: Optional[Path] = None

    @model_validator(mode="after")
    def one_instance(self) -> "RunConfig":
        if (self.tree is None) == (self.network is None):
            raise ValueError("give exactly one of tree or network")
        if self.network is not None and self.demands is None:
            raise ValueError("a network run needs a demands directory")
        return self


class SolveRequest(BaseModel):
    """Inline tree document plus run options."""
    tree: TreeDocument
    options: RunOptions


class RhoRequest(BaseModel):
    """Radius calibration query."""
    divergence: str = "kl"
    n: int = Field(..., ge=2)
    N: Optional[int] = Field(None, ge=1)
    confidence: float = Field(0.95, gt=0, lt=1)


class RhoResponse(BaseModel):
    """Calibrated radius."""
    divergence: str
    n: int
    N: int
    confidence: float
    rho: float


class DivergenceInfo(BaseModel):
    """One entry of the divergence catalogue."""
    name: str
    sbar: Optional[float]  # null when unbounded
    curvature_at_one: Optional[float]
    feasibility_cuts: bool
