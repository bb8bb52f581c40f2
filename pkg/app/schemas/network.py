from typing import Literal, Optional, Union

from pydantic import BaseModel, Field


NETWORK_FORMAT_VERSION = 1

NodeType = Literal["PR", "TP", "PU", "NU", "RF", "CAP", "D"]
ConfigTag = Literal["WWTP", "IPR"]


# ============== Network Schemas ==============

class NetworkNodeDocument(BaseModel):
    """A typed network node. Capacities left null are unbounded."""
    id: str = Field(..., min_length=1)
    type: NodeType
    zone: Optional[str] = None
    config: Optional[ConfigTag] = None  # present only from this infrastructure option up
    base_demand: float = Field(0.0, ge=0)  # af/year in the base year, PU/NU only
    returns: bool = False  # PU whose wastewater is returned (l·d)
    pump_capacity: Optional[float] = Field(None, ge=0)  # U^RFTP, RF and TP outflow
    treatment_capacity: Optional[float] = Field(None, ge=0)  # U^TP, TP inflow
    storage_capacity: Optional[float] = Field(None, ge=0)  # U^RF
    initial_storage: float = Field(0.0, ge=0)
    storage_cost: Optional[float] = None


class NetworkArcDocument(BaseModel):
    """A pipe. `loss` is the delivered fraction a ∈ [0, 1] of what enters the arc."""
    source: str = Field(..., alias="from")
    to: str
    cost: float = 0.0
    loss: float = Field(1.0, ge=0, le=1)
    capacity: Optional[float] = Field(None, ge=0)
    config: Optional[ConfigTag] = None

    model_config = {"populate_by_name": True}


class NetworkDocument(BaseModel):
    """Water network instance file."""
    version: int = NETWORK_FORMAT_VERSION
    name: Optional[str] = None
    base_year: int = 2018
    discount_rate: float = Field(0.04, ge=0)
    shortage_cost: float = Field(800.0, ge=0)
    storage_cost: float = 0.0
    return_fraction: float = Field(0.4, ge=0, le=1)
    # study-area share of the city allotment per population scenario; a list gives one value per stage
    allotment_share: dict[str, Union[float, list[float]]] = Field(
        default_factory=lambda: {"high": 1.0, "low": 1.0}
    )
    nodes: list[NetworkNodeDocument]
    arcs: list[NetworkArcDocument]


class InfrastructureDocument(BaseModel):
    """Infrastructure option with optional capacity and cost overrides for its facilities."""
    option: Literal["NI", "WWTP", "IPR"] = "NI"
    capacities: dict[str, float] = Field(default_factory=dict)
    arc_costs: dict[str, float] = Field(default_factory=dict)  # "from->to": cost
