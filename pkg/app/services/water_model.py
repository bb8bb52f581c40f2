"""
Water allocation application: typed supply network, per-stage LP blocks,
Colorado River allotment scenarios and the composed scenario tree.

Per period of a stage the decision vector holds arc flows, recharge
storage and release at RF nodes, and shortage at every user node (served
by the dummy node D). Stage LPs share A, B and c across the nodes of a
stage; only the right-hand sides (demands, allotment, initial storage)
vary by node.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.exceptions import IngestionError, InputError, ModelError
from app.schemas.network import (
    InfrastructureDocument,
    NetworkArcDocument,
    NetworkDocument,
    NetworkNodeDocument,
)
from app.services.scenario_tree import (
    DEFAULT_MAX_NODES,
    ScenarioTree,
    StageData,
    build_balanced,
    enumerate_scenarios,
    validation_to_input_error,
)

logger = logging.getLogger(__name__)

BASE_YEAR = 2018
DEFAULT_STAGES = 5
DEFAULT_PERIODS = 8

CLIMATE_MODELS = ("CSIRO", "GFDL-CM3", "GFDL-ESM2M", "HadGEM2-ES", "MIROC5", "MIROC-ESM-CHEM")
CONCENTRATION_PATHS = ("rcp26", "rcp45", "rcp60", "rcp85")
GPCD_MODELS = ("higher", "lower")
POPULATIONS = ("high", "low")


class AllotmentCondition(str, Enum):
    NORMAL = "Normal"
    TIER1 = "Tier1"
    TIER2 = "Tier2"
    TIER3 = "Tier3"


# City-level Colorado River allotment (af/year) per condition
TIER_ALLOTMENTS = {
    AllotmentCondition.NORMAL: 144_000.0,
    AllotmentCondition.TIER1: 127_541.0,
    AllotmentCondition.TIER2: 123_422.0,
    AllotmentCondition.TIER3: 119_318.0,
}

# Nominal probability of each condition per stage (Normal, Tier1, Tier2, Tier3)
TIER_PROBABILITIES = (
    (1.0000, 0.0000, 0.0000, 0.0000),
    (0.6038, 0.0817, 0.0725, 0.2420),
    (0.4699, 0.1014, 0.0800, 0.3488),
    (0.3990, 0.0854, 0.0686, 0.4470),
    (0.3663, 0.0805, 0.0532, 0.5000),
)


class InfraOption(str, Enum):
    NI = "NI"
    WWTP = "WWTP"
    IPR = "IPR"


_OPTION_RANK = {InfraOption.NI: 0, InfraOption.WWTP: 1, InfraOption.IPR: 2}


# ============== Scalars ==============

def discount_factor(year: int, base_year: int = BASE_YEAR, rate: float = 0.04) -> float:
    """Present-value factor (1 + rate)^−(year − base_year)."""
    if year < base_year:
        raise InputError(f"year {year} precedes the base year {base_year}")
    return (1.0 + rate) ** (-(year - base_year))


def tier_allotment(condition: Union[AllotmentCondition, str]) -> float:
    """City-level allotment in acre-feet for an allotment condition."""
    try:
        return TIER_ALLOTMENTS[AllotmentCondition(condition)]
    except ValueError:
        valid = ", ".join(c.value for c in AllotmentCondition)
        raise InputError(f"unknown allotment condition '{condition}'; valid: {valid}")


def tier_probabilities(stage: int) -> np.ndarray:
    if not 1 <= stage <= len(TIER_PROBABILITIES):
        raise InputError(f"allotment probabilities exist for stages 1..{len(TIER_PROBABILITIES)}, got {stage}")
    return np.array(TIER_PROBABILITIES[stage - 1])


def stage_years(stage: int, periods: int = DEFAULT_PERIODS, base_year: int = BASE_YEAR) -> list[int]:
    """Stage 1 is the base year alone; later stages cover `periods` consecutive years each."""
    if stage == 1:
        return [base_year]
    first = base_year + 1 + periods * (stage - 2)
    return list(range(first, first + periods))


# ============== Network ==============

@dataclass
class InfrastructureConfig:
    option: InfraOption = InfraOption.NI
    capacities: dict[str, float] = field(default_factory=dict)
    arc_costs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.option = InfraOption(self.option)
        except ValueError:
            raise InputError(f"unknown infrastructure option '{self.option}'; valid: NI, WWTP, IPR")

    @classmethod
    def from_document(cls, doc: InfrastructureDocument) -> "InfrastructureConfig":
        return cls(InfraOption(doc.option), dict(doc.capacities), dict(doc.arc_costs))

    def includes(self, tag: Optional[str]) -> bool:
        """Facilities tagged WWTP exist under WWTP and IPR; IPR facilities only under IPR."""
        if tag is None:
            return True
        return _OPTION_RANK[self.option] >= _OPTION_RANK[InfraOption(tag)]


class WaterNetwork:
    """Validated network document with typed node lookups."""

    def __init__(self, document: NetworkDocument):
        self.document = document
        self.nodes: dict[str, NetworkNodeDocument] = {}
        for node in document.nodes:
            if node.id in self.nodes:
                raise ModelError(f"duplicate network node '{node.id}'")
            self.nodes[node.id] = node
        self._validate()

    def _validate(self):
        doc = self.document
        for kind in ("CAP", "D"):
            if len(self.of_type(kind)) > 1:
                raise ModelError(f"network may have at most one {kind} node")
        for arc in doc.arcs:
            for end in (arc.source, arc.to):
                if end not in self.nodes:
                    raise ModelError(f"arc {arc.source}->{arc.to} references unknown node '{end}'")
            source, target = self.nodes[arc.source], self.nodes[arc.to]
            if target.type == "CAP":
                raise ModelError(f"arc {arc.source}->{arc.to} flows into the CAP source")
            if "D" in (source.type, target.type):
                raise ModelError(f"arc {arc.source}->{arc.to} touches the dummy node; shortage arcs are implicit")
            if source.type == "NU":
                raise ModelError(f"nonpotable user '{source.id}' cannot have outgoing arcs")
            if source.type == "PU" and not source.returns:
                raise ModelError(f"potable user '{source.id}' has outgoing arcs but no return flag")
        for node in doc.nodes:
            if node.returns and node.type != "PU":
                raise ModelError(f"return flag set on non-PU node '{node.id}'")
        for population in POPULATIONS:
            if population not in doc.allotment_share:
                raise ModelError(f"allotment share for population '{population}' is missing")

    @property
    def name(self) -> Optional[str]:
        return self.document.name

    @property
    def base_year(self) -> int:
        return self.document.base_year

    @property
    def cap(self) -> Optional[NetworkNodeDocument]:
        found = self.of_type("CAP")
        return found[0] if found else None

    @property
    def dummy(self) -> Optional[NetworkNodeDocument]:
        found = self.of_type("D")
        return found[0] if found else None

    def of_type(self, *kinds: str, config: Optional[InfrastructureConfig] = None) -> list[NetworkNodeDocument]:
        return [
            n for n in self.document.nodes
            if n.type in kinds and (config is None or config.includes(n.config))
        ]

    def demand_nodes(self) -> list[NetworkNodeDocument]:
        return self.of_type("PU", "NU")

    def active_arcs(self, config: InfrastructureConfig) -> list[NetworkArcDocument]:
        return [
            arc for arc in self.document.arcs
            if config.includes(arc.config)
            and config.includes(self.nodes[arc.source].config)
            and config.includes(self.nodes[arc.to].config)
        ]

    def share(self, population: str, stage: int) -> float:
        """Study-area share of the city allotment for a population scenario at a stage."""
        value = self.document.allotment_share[population]
        if isinstance(value, list):
            if not 1 <= stage <= len(value):
                raise ModelError(f"allotment share for '{population}' has no entry for stage {stage}")
            return float(value[stage - 1])
        return float(value)

    def mean_share(self, stage: int) -> float:
        return float(np.mean([self.share(p, stage) for p in POPULATIONS]))


def load_network(path: Union[str, Path]) -> WaterNetwork:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IngestionError(f"cannot read network file {path}: {e}")
    try:
        document = NetworkDocument.model_validate_json(text)
    except ValidationError as e:
        raise validation_to_input_error(e, str(path))
    return WaterNetwork(document)


def save_network(document: NetworkDocument, path: Union[str, Path]) -> None:
    Path(path).write_text(document.model_dump_json(indent=2, by_alias=True) + "\n", encoding="utf-8")


# ============== Stage LP ==============

@dataclass
class WaterStage:
    """Realized data of one node: per-period demands (af) by user node and CAP allotment (af)."""

    stage: int
    years: list[int]
    demands: dict[str, np.ndarray]
    cap: np.ndarray
    labels: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.cap = np.asarray(self.cap, dtype=float).reshape(-1)
        if self.cap.size != self.periods:
            raise InputError(f"allotment has {self.cap.size} periods, stage has {self.periods}")
        demands = {}
        for node, values in self.demands.items():
            values = np.asarray(values, dtype=float).reshape(-1)
            if values.size != self.periods:
                raise InputError(f"demand for '{node}' has {values.size} periods, stage has {self.periods}")
            if np.any(values < 0):
                raise InputError(f"demand for '{node}' is negative")
            demands[node] = values
        self.demands = demands

    @property
    def periods(self) -> int:
        return len(self.years)


class _RowBuilder:
    def __init__(self):
        self.rows: list[dict[int, float]] = []
        self.coupling: list[dict[int, float]] = []
        self.rhs: list[float] = []

    def add(self, coefficients: dict[int, float], rhs: float = 0.0, coupling: Optional[dict[int, float]] = None) -> int:
        self.rows.append(coefficients)
        self.coupling.append(coupling or {})
        self.rhs.append(rhs)
        return len(self.rows) - 1

    def matrices(self, n_cols: int, n_prev: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        A = np.zeros((len(self.rows), n_cols))
        B = np.zeros((len(self.rows), n_prev))
        for i, (row, link) in enumerate(zip(self.rows, self.coupling)):
            for j, value in row.items():
                A[i, j] += value
            for j, value in link.items():
                B[i, j] += value
        return A, B, np.array(self.rhs, dtype=float)


class StageLayout:
    """
    Columns and rows shared by every node of a stage.

    Equality rows: balance at PR/TP, demand + shortage = d at PU/NU, total
    return flow = l·d at returning PU, storage recursion at RF. Inequality
    rows: infiltration lag at RF, CAP allotment, pumping (RF/TP outflow)
    and treatment (TP inflow) capacities. The first period's storage terms
    couple to the parent stage's last-period storage through B; the root
    uses the network's initial storage instead.
    """

    def __init__(
        self,
        network: WaterNetwork,
        config: Optional[InfrastructureConfig] = None,
        years: Sequence[int] = (BASE_YEAR,),
        parent: Optional["StageLayout"] = None,
        initial_storage: Optional[Mapping[str, float]] = None,
    ):
        self.network = network
        self.config = config or InfrastructureConfig()
        self.years = list(years)
        self.parent = parent
        doc = network.document
        P = len(self.years)

        self.arcs = network.active_arcs(self.config)
        self.rf = [n.id for n in network.of_type("RF", config=self.config)]
        self.balance_nodes = [n.id for n in network.of_type("PR", "TP", config=self.config)]
        self.users = [n.id for n in network.of_type("PU", "NU", config=self.config)]
        self.returning = [n.id for n in network.of_type("PU", config=self.config) if n.returns]
        has_dummy = network.dummy is not None
        cap = network.cap

        incoming: dict[str, list[int]] = {node: [] for node in network.nodes}
        outgoing: dict[str, list[int]] = {node: [] for node in network.nodes}
        for k, arc in enumerate(self.arcs):
            outgoing[arc.source].append(k)
            incoming[arc.to].append(k)
        for user in self.users:
            if not incoming[user] and not has_dummy:
                raise ModelError(f"demand node '{user}' is disconnected: no supply arcs and no dummy node")
        for user in self.returning:
            if not outgoing[user]:
                raise ModelError(f"returning user '{user}' has no active return arc")

        # ----- columns -----
        columns: list[str] = []
        cost: list[float] = []
        upper: list[float] = []

        def column(name: str, c: float, u: Optional[float]) -> int:
            columns.append(name)
            cost.append(c)
            upper.append(math.inf if u is None else u)
            return len(columns) - 1

        self.flow = np.zeros((P, len(self.arcs)), dtype=int)
        self.storage = np.zeros((P, len(self.rf)), dtype=int)
        self.release = np.zeros((P, len(self.rf)), dtype=int)
        self.shortage = np.zeros((P, len(self.users) if has_dummy else 0), dtype=int)
        for p, year in enumerate(self.years):
            disc = discount_factor(year, doc.base_year, doc.discount_rate)
            for k, arc in enumerate(self.arcs):
                key = f"{arc.source}->{arc.to}"
                self.flow[p, k] = column(
                    f"flow[{key},{year}]", disc * self.config.arc_costs.get(key, arc.cost), arc.capacity
                )
            for k, rf in enumerate(self.rf):
                node = network.nodes[rf]
                storage_cost = doc.storage_cost if node.storage_cost is None else node.storage_cost
                capacity = self.config.capacities.get(rf, node.storage_capacity)
                self.storage[p, k] = column(f"storage[{rf},{year}]", disc * storage_cost, capacity)
                self.release[p, k] = column(f"release[{rf},{year}]", 0.0, None)
            if has_dummy:
                for k, user in enumerate(self.users):
                    self.shortage[p, k] = column(f"short[{user},{year}]", disc * doc.shortage_cost, None)

        self.columns = columns
        self.c = np.array(cost)
        self.ub = np.array(upper)
        n_prev = 0 if parent is None else len(parent.columns)
        initial = {
            rf: (initial_storage or {}).get(rf, network.nodes[rf].initial_storage) for rf in self.rf
        }

        def inflow(node: str, p: int) -> dict[int, float]:
            return {int(self.flow[p, k]): self.arcs[k].loss for k in incoming[node]}

        def outflow(node: str, p: int, sign: float = 1.0) -> dict[int, float]:
            return {int(self.flow[p, k]): sign for k in outgoing[node]}

        def merge(*parts: dict[int, float]) -> dict[int, float]:
            out: dict[int, float] = {}
            for part in parts:
                for j, value in part.items():
                    out[j] = out.get(j, 0.0) + value
            return out

        def parent_storage(rf: str) -> Optional[int]:
            if parent is None:
                return None
            if rf not in parent.rf:
                raise ModelError(f"recharge facility '{rf}' is missing from the previous stage")
            return int(parent.storage[-1, parent.rf.index(rf)])

        # ----- equality rows -----
        eq = _RowBuilder()
        self.demand_rows = np.zeros((P, len(self.users)), dtype=int)
        self.return_rows = np.zeros((P, len(self.returning)), dtype=int)
        for p in range(P):
            for node in self.balance_nodes:
                eq.add(merge(inflow(node, p), outflow(node, p, -1.0)))
            for k, user in enumerate(self.users):
                row = inflow(user, p)
                if has_dummy:
                    row = merge(row, {int(self.shortage[p, k]): 1.0})
                self.demand_rows[p, k] = eq.add(row)
            for k, user in enumerate(self.returning):
                self.return_rows[p, k] = eq.add(outflow(user, p))
            for k, rf in enumerate(self.rf):
                row = merge(
                    inflow(rf, p),
                    outflow(rf, p, -1.0),
                    {int(self.release[p, k]): -1.0, int(self.storage[p, k]): -1.0},
                )
                if p > 0:
                    eq.add(merge(row, {int(self.storage[p - 1, k]): 1.0}))
                elif parent is None:
                    eq.add(row, rhs=-initial[rf])
                else:
                    eq.add(row, coupling={parent_storage(rf): -1.0})

        # ----- inequality rows -----
        ub = _RowBuilder()
        self.cap_rows = np.zeros(P if cap is not None else 0, dtype=int)
        for p in range(P):
            for k, rf in enumerate(self.rf):
                row = outflow(rf, p)
                if p > 0:
                    ub.add(merge(row, {int(self.storage[p - 1, k]): -1.0}))
                elif parent is None:
                    ub.add(row, rhs=initial[rf])
                else:
                    ub.add(row, coupling={parent_storage(rf): 1.0})
            if cap is not None:
                self.cap_rows[p] = ub.add(outflow(cap.id, p))
            for node in network.of_type("RF", "TP", config=self.config):
                limit = self.config.capacities.get(f"{node.id}:pump", node.pump_capacity)
                if limit is not None:
                    ub.add(outflow(node.id, p), rhs=limit)
            for node in network.of_type("TP", config=self.config):
                limit = self.config.capacities.get(node.id, node.treatment_capacity)
                if limit is not None:
                    ub.add({int(self.flow[p, k]): 1.0 for k in incoming[node.id]}, rhs=limit)

        self.A, self.B, self.b = eq.matrices(len(columns), n_prev)
        self.A_ub, self.B_ub, self.b_ub = ub.matrices(len(columns), n_prev)
        self.shortage_columns = self.shortage.reshape(-1)
        logger.debug(
            f"Stage layout {self.years[0]}-{self.years[-1]}: {len(columns)} columns, "
            f"{self.A.shape[0]} equality rows, {self.A_ub.shape[0]} inequality rows"
        )

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    def rhs(self, stage: WaterStage) -> tuple[np.ndarray, np.ndarray]:
        if stage.periods != len(self.years):
            raise InputError(f"stage has {stage.periods} periods, layout expects {len(self.years)}")
        missing = [u for u in self.users if u not in stage.demands]
        if missing:
            raise InputError(f"no demand given for user nodes: {', '.join(missing)}")
        demand = np.column_stack([stage.demands[u] for u in self.users]) if self.users else np.zeros((stage.periods, 0))
        b = self.b.copy()
        b[self.demand_rows] = demand
        if self.returning:
            positions = [self.users.index(u) for u in self.returning]
            b[self.return_rows] = self.network.document.return_fraction * demand[:, positions]
        b_ub = self.b_ub.copy()
        if self.cap_rows.size:
            b_ub[self.cap_rows] = stage.cap
        return b, b_ub

    def stage_data(self, stage: WaterStage) -> StageData:
        b, b_ub = self.rhs(stage)
        has_ub = b_ub.size > 0
        return StageData(
            A=self.A,
            B=self.B,
            b=b,
            c=self.c,
            A_ub=self.A_ub if has_ub else None,
            B_ub=self.B_ub if has_ub else None,
            b_ub=b_ub if has_ub else None,
            ub=self.ub,
            columns=self.columns,
            meta={
                **stage.labels,
                "stage": stage.stage,
                "years": list(stage.years),
                "shortage_columns": self.shortage_columns,
            },
        )


def build_stage_lp(
    network: WaterNetwork,
    stage: WaterStage,
    config: Optional[InfrastructureConfig] = None,
    initial_storage: Optional[Mapping[str, float]] = None,
    parent: Optional[StageLayout] = None,
) -> StageData:
    """
    Stage LP blocks for one node. Without a parent layout the previous
    storage enters as the constant `initial_storage` (network values by
    default); with one it couples through B.
    """
    layout = StageLayout(network, config, stage.years, parent=parent, initial_storage=initial_storage)
    return layout.stage_data(stage)


# ============== Demand series ==============

@dataclass(frozen=True)
class DemandScenario:
    rcp: str
    model: str
    gpcd: str
    population: str

    @property
    def filename(self) -> str:
        return f"{self.rcp}_{self.model}_{self.gpcd}_{self.population}.csv"


class DemandTable:
    """Annual demand (af) per scenario combination, each a year × node frame."""

    def __init__(self, series: Mapping[DemandScenario, pd.DataFrame]):
        self.series = dict(series)

    def demand(self, scenario: DemandScenario, years: Sequence[int], nodes: Sequence[str]) -> np.ndarray:
        try:
            frame = self.series[scenario]
        except KeyError:
            raise IngestionError(f"demand series {scenario.filename} was not loaded")
        try:
            return frame.loc[list(years), list(nodes)].to_numpy(dtype=float)
        except KeyError as e:
            raise IngestionError(f"demand series {scenario.filename} lacks entries: {e}")

    def mean(self, years: Sequence[int], nodes: Sequence[str]) -> np.ndarray:
        """Average over every loaded series; the deterministic first stage uses this."""
        if not self.series:
            raise IngestionError("no demand series loaded")
        stacked = [self.demand(s, years, nodes) for s in sorted(self.series, key=lambda s: s.filename)]
        return np.mean(stacked, axis=0)


def load_demands(directory: Union[str, Path], scenarios: Iterable[DemandScenario]) -> DemandTable:
    """Read one CSV (columns year, node, demand) per scenario combination."""
    directory = Path(directory)
    scenarios = list(scenarios)
    missing = [s.filename for s in scenarios if not (directory / s.filename).is_file()]
    if missing:
        shown = ", ".join(missing[:8]) + (f" (+{len(missing) - 8} more)" if len(missing) > 8 else "")
        raise IngestionError(f"missing demand series in {directory}: {shown}")
    series = {}
    for scenario in scenarios:
        path = directory / scenario.filename
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError) as e:
            raise IngestionError(f"cannot read demand series {path}: {e}")
        absent = {"year", "node", "demand"} - set(frame.columns)
        if absent:
            raise IngestionError(f"{path}: missing columns {', '.join(sorted(absent))}")
        if (frame["demand"] < 0).any():
            raise IngestionError(f"{path}: negative demand")
        series[scenario] = frame.pivot_table(index="year", columns="node", values="demand", aggfunc="sum")
    return DemandTable(series)


@dataclass
class DemandKnobs:
    """Shape of the synthetic per-capita demand model."""

    trend: float = 0.002
    harmonic_amplitude: float = 0.03
    harmonic_period: float = 11.0
    temperature_sensitivity: float = 0.02
    warming_per_decade: dict[str, float] = field(
        default_factory=lambda: {"rcp26": 0.15, "rcp45": 0.25, "rcp60": 0.30, "rcp85": 0.45}
    )
    model_sensitivity: dict[str, float] = field(
        default_factory=lambda: {
            "CSIRO": 0.9, "GFDL-CM3": 1.2, "GFDL-ESM2M": 0.8,
            "HadGEM2-ES": 1.25, "MIROC5": 1.0, "MIROC-ESM-CHEM": 1.3,
        }
    )
    gpcd_factor: dict[str, float] = field(default_factory=lambda: {"higher": 1.08, "lower": 0.92})
    population_growth: dict[str, float] = field(default_factory=lambda: {"high": 0.018, "low": 0.008})
    noise: float = 0.0


def all_demand_scenarios() -> list[DemandScenario]:
    return [
        DemandScenario(rcp, model, gpcd, population)
        for rcp in CONCENTRATION_PATHS
        for model in CLIMATE_MODELS
        for gpcd in GPCD_MODELS
        for population in POPULATIONS
    ]


def generate_demands(
    network: WaterNetwork,
    directory: Union[str, Path],
    scenarios: Optional[Iterable[DemandScenario]] = None,
    last_year: int = 2050,
    knobs: Optional[DemandKnobs] = None,
    seed: int = 0,
) -> list[Path]:
    """
    Write synthetic demand tables: base demand × population growth ×
    GPCD factor × (linear trend + multi-year harmonic + warming response).
    """
    knobs = knobs or DemandKnobs()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base = network.base_year
    years = np.arange(base, last_year + 1)
    elapsed = years - base
    rng = np.random.default_rng(seed)
    users = network.demand_nodes()
    written = []
    for scenario in scenarios or all_demand_scenarios():
        warming = knobs.warming_per_decade[scenario.rcp] * knobs.model_sensitivity[scenario.model] * elapsed / 10.0
        phase = CLIMATE_MODELS.index(scenario.model) * 0.7
        per_capita = knobs.gpcd_factor[scenario.gpcd] * (
            1.0
            + knobs.trend * elapsed
            + knobs.harmonic_amplitude * np.sin(2.0 * np.pi * elapsed / knobs.harmonic_period + phase)
            + knobs.temperature_sensitivity * warming
        )
        population = (1.0 + knobs.population_growth[scenario.population]) ** elapsed
        rows = []
        for user in users:
            demand = user.base_demand * per_capita * population
            if knobs.noise:
                demand = demand * (1.0 + rng.normal(0.0, knobs.noise, size=demand.size))
            rows.append(pd.DataFrame({"year": years, "node": user.id, "demand": np.maximum(demand, 0.0)}))
        frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=["year", "node", "demand"])
        path = directory / scenario.filename
        frame.to_csv(path, index=False, float_format="%.6f")
        written.append(path)
    logger.info(f"Wrote {len(written)} demand series to {directory}")
    return written


# ============== Scenario tree ==============

@dataclass(frozen=True)
class TreeScale:
    """All 24 (concentration path, climate model) pairs, or k of them."""

    combos: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "TreeScale":
        value = text.strip().lower()
        if value == "full":
            return cls()
        for prefix in ("reduced:", "reduced=", "reduced("):
            if value.startswith(prefix):
                try:
                    return cls(int(value[len(prefix):].rstrip(")")))
                except ValueError:
                    break
        raise InputError(f"unknown tree scale '{text}'; expected full or reduced:k")

    def pairs(self) -> list[tuple[str, str]]:
        pairs = [(rcp, model) for rcp in CONCENTRATION_PATHS for model in CLIMATE_MODELS]
        if self.combos is None:
            return pairs
        if not 1 <= self.combos <= len(pairs):
            raise InputError(f"reduced scale needs 1..{len(pairs)} climate combinations, got {self.combos}")
        picks = sorted(set(np.linspace(0, len(pairs) - 1, self.combos).round().astype(int).tolist()))
        return [pairs[i] for i in picks]

    def scenarios(self) -> list[DemandScenario]:
        return [
            DemandScenario(rcp, model, gpcd, population)
            for rcp, model in self.pairs()
            for gpcd in GPCD_MODELS
            for population in POPULATIONS
        ]

    @property
    def label(self) -> str:
        return "full" if self.combos is None else f"reduced:{self.combos}"


def build_water_tree(
    network: WaterNetwork,
    demands: DemandTable,
    config: Optional[InfrastructureConfig] = None,
    scale: Optional[TreeScale] = None,
    stages: int = DEFAULT_STAGES,
    periods: int = DEFAULT_PERIODS,
    rho: Union[float, Sequence[float]] = 0.1,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> ScenarioTree:
    """
    Stage 2 branches on (climate pair, GPCD model, population, allotment);
    later stages on (population, allotment) with the climate pair and GPCD
    model fixed along the path. Conditional probabilities depend only on
    the allotment condition, normalized per stage.
    """
    config = config or InfrastructureConfig()
    scale = scale or TreeScale()
    if not 2 <= stages <= len(TIER_PROBABILITIES):
        raise InputError(f"water trees have 2..{len(TIER_PROBABILITIES)} stages, got {stages}")

    conditions = list(AllotmentCondition)
    pairs = scale.pairs()
    first = [
        (pair, gpcd, population, condition)
        for pair in pairs
        for gpcd in GPCD_MODELS
        for population in POPULATIONS
        for condition in conditions
    ]
    later = [(population, condition) for population in POPULATIONS for condition in conditions]
    probabilities = {t: tier_probabilities(t) / tier_probabilities(t).sum() for t in range(1, stages + 1)}
    first_weight = len(pairs) * len(GPCD_MODELS) * len(POPULATIONS)

    years = {t: stage_years(t, periods, network.base_year) for t in range(1, stages + 1)}
    layouts: dict[int, StageLayout] = {1: StageLayout(network, config, years[1])}
    for t in range(2, stages + 1):
        layouts[t] = StageLayout(network, config, years[t], parent=layouts[t - 1])
    users = layouts[1].users

    def prob_rule(path: tuple[int, ...]) -> float:
        t = len(path) + 1
        if t == 2:
            condition = first[path[0]][3]
            return probabilities[2][conditions.index(condition)] / first_weight
        condition = later[path[-1]][1]
        return probabilities[t][conditions.index(condition)] / len(POPULATIONS)

    cache: dict[tuple, StageData] = {}

    def data_rule(path: tuple[int, ...]) -> StageData:
        t = len(path) + 1
        if t == 1:
            key: tuple = ("root",)
        else:
            (rcp, model), gpcd, population, condition = first[path[0]]
            if t > 2:
                population, condition = later[path[-1]]
            key = (t, rcp, model, gpcd, population, condition)
        if key in cache:
            return cache[key]

        if t == 1:
            demand = demands.mean(years[1], users)
            cap = tier_allotment(AllotmentCondition.NORMAL) * network.mean_share(1)
            labels: dict[str, Any] = {"allotment": AllotmentCondition.NORMAL.value}
        else:
            demand = demands.demand(DemandScenario(rcp, model, gpcd, population), years[t], users)
            cap = tier_allotment(condition) * network.share(population, t)
            labels = {
                "rcp": rcp, "model": model, "gpcd": gpcd,
                "population": population, "allotment": condition.value,
            }
        stage = WaterStage(
            stage=t,
            years=years[t],
            demands={u: demand[:, k] for k, u in enumerate(users)},
            cap=np.full(len(years[t]), cap),
            labels=labels,
        )
        cache[key] = layouts[t].stage_data(stage)
        return cache[key]

    rho_rule = rho if isinstance(rho, (int, float)) else (lambda t, values=list(rho): values[t - 1])
    tree = build_balanced(
        stages,
        [len(first)] + [len(later)] * (stages - 2),
        prob_rule=prob_rule,
        data_rule=data_rule,
        rho_rule=rho_rule,
        max_nodes=max_nodes,
        name=f"{network.name or 'water'}-{config.option.value}-{scale.label}",
    )
    logger.info(
        f"Water tree {tree.name}: {len(tree)} nodes, {len(tree.leaves())} leaves, "
        f"{len(cache)} distinct stage blocks"
    )
    return tree


# ============== Shortage report ==============

@dataclass
class ShortageReport:
    scenarios: pd.DataFrame
    cdf: pd.DataFrame
    breakdown: pd.DataFrame

    def cdf_at(self, shortage: float) -> float:
        """Nominal probability that total shortage is at most `shortage`."""
        mask = self.scenarios["shortage"] <= shortage + 1e-9
        return float(self.scenarios.loc[mask, "probability"].sum())

    def dominates(self, other: "ShortageReport", tol: float = 1e-9) -> bool:
        """True when this CDF lies at or above `other` everywhere."""
        points = sorted(set(self.cdf["shortage"]).union(other.cdf["shortage"]))
        return all(self.cdf_at(x) >= other.cdf_at(x) - tol for x in points)

    def write(self, directory: Union[str, Path]) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, frame in (("shortage_scenarios", self.scenarios), ("shortage_cdf", self.cdf), ("shortage_breakdown", self.breakdown)):
            path = directory / f"{name}.csv"
            frame.to_csv(path, index=False, float_format="%.6f")
            paths.append(path)
        return paths


def shortage_report(state: Any, tree: ScenarioTree) -> ShortageReport:
    """
    Total shortage (af) along every root-to-leaf path under the incumbent
    policy, its empirical CDF under nominal path probabilities and a
    breakdown by GPCD model and number of high-population stages ("iH").
    """
    if not state.incumbent:
        raise InputError("no incumbent policy to report on")
    node_shortage: dict[int, float] = {}
    for node in tree:
        data = tree.data(node.id)
        columns = data.meta.get("shortage_columns")
        if columns is None:
            raise InputError(f"node {node.id} carries no shortage columns; not a water instance")
        node_shortage[node.id] = float(np.sum(state.incumbent[node.id].x[columns]))

    rows = []
    for scenario in enumerate_scenarios(tree):
        labels = [tree.data(n).meta for n in scenario.path[1:]]
        high = sum(1 for meta in labels if meta.get("population") == "high")
        rows.append(
            {
                "leaf": scenario.leaf_id,
                "probability": scenario.probability,
                "shortage": round(sum(node_shortage[n] for n in scenario.path), 6),
                "rcp": labels[0].get("rcp") if labels else None,
                "model": labels[0].get("model") if labels else None,
                "gpcd": labels[0].get("gpcd") if labels else None,
                "population": f"{high}H pop",
            }
        )
    scenarios = pd.DataFrame(rows)

    mass = scenarios.groupby("shortage", sort=True)["probability"].sum()
    cdf = pd.DataFrame({"shortage": mass.index.to_numpy(), "cdf": mass.cumsum().to_numpy()})

    weighted = scenarios.assign(weighted=scenarios["probability"] * scenarios["shortage"])
    grouped = weighted.groupby(["gpcd", "population"], dropna=False)
    breakdown = grouped.agg(
        probability=("probability", "sum"),
        weighted=("weighted", "sum"),
        max_shortage=("shortage", "max"),
    ).reset_index()
    breakdown["mean_shortage"] = breakdown["weighted"] / breakdown["probability"].where(breakdown["probability"] > 0)
    breakdown = breakdown.drop(columns="weighted")
    return ShortageReport(scenarios, cdf, breakdown)


# ============== Network generator ==============

DEFAULT_ZONES = ("C", "D", "E", "FS", "FN", "G", "H", "I")
RECHARGE_ZONES = ("C", "E", "G", "H", "I")


def generate_network(
    zones: Sequence[str] = DEFAULT_ZONES,
    base_demand: float = 20_000.0,
    name: str = "tucson-like",
) -> NetworkDocument:
    """
    Zoned network with the CAP source, a CAP treatment plant, a central
    wastewater plant, a reservoir and potable/nonpotable users per zone,
    recharge facilities, and the WWTP/IPR facilities in the first zone.
    Pumping cost grows with the zone index.
    """
    if not zones:
        raise InputError("network generator needs at least one zone")
    nodes = [
        NetworkNodeDocument(id="CAP", type="CAP"),
        NetworkNodeDocument(id="D", type="D"),
        NetworkNodeDocument(id="cap_tp", type="TP", treatment_capacity=400_000.0),
        NetworkNodeDocument(id="central_wwtp", type="TP"),
    ]
    arcs = [NetworkArcDocument(source="CAP", to="cap_tp", cost=50.0, loss=0.98)]
    head = zones[0]
    arcs.append(NetworkArcDocument(source="cap_tp", to=f"res_{head}", cost=20.0, loss=0.99))
    for k, zone in enumerate(zones):
        scale = 1.0 + 0.15 * k
        nodes += [
            NetworkNodeDocument(id=f"res_{zone}", type="PR", zone=zone),
            NetworkNodeDocument(id=f"pu_{zone}", type="PU", zone=zone, base_demand=round(base_demand * scale, 1), returns=True),
            NetworkNodeDocument(id=f"nu_{zone}", type="NU", zone=zone, base_demand=round(0.2 * base_demand * scale, 1)),
        ]
        arcs += [
            NetworkArcDocument(source=f"res_{zone}", to=f"pu_{zone}", cost=8.0, loss=0.98),
            NetworkArcDocument(source=f"res_{zone}", to=f"nu_{zone}", cost=8.0, loss=0.98),
            NetworkArcDocument(source=f"pu_{zone}", to="central_wwtp", cost=3.0, loss=1.0),
            NetworkArcDocument(source="central_wwtp", to=f"nu_{zone}", cost=40.0 + 5.0 * k, loss=0.97),
        ]
        if k + 1 < len(zones):
            arcs.append(
                NetworkArcDocument(source=f"res_{zone}", to=f"res_{zones[k + 1]}", cost=15.0 + 5.0 * k, loss=0.99)
            )
        if zone in RECHARGE_ZONES:
            nodes.append(
                NetworkNodeDocument(
                    id=f"rf_{zone}", type="RF", zone=zone,
                    storage_capacity=60_000.0, initial_storage=20_000.0, pump_capacity=30_000.0,
                )
            )
            arcs += [
                NetworkArcDocument(source="CAP", to=f"rf_{zone}", cost=45.0, loss=0.95),
                NetworkArcDocument(source=f"rf_{zone}", to=f"res_{zone}", cost=30.0, loss=0.99),
            ]
    recharge = [z for z in zones if z in RECHARGE_ZONES]
    if recharge:
        arcs.append(NetworkArcDocument(source="central_wwtp", to=f"rf_{recharge[0]}", cost=10.0, loss=1.0))

    nodes += [
        NetworkNodeDocument(id=f"wwtp_{head}", type="TP", zone=head, config="WWTP", treatment_capacity=10_000.0),
        NetworkNodeDocument(id=f"ipr_{head}", type="TP", zone=head, config="IPR", treatment_capacity=5_000.0),
    ]
    arcs += [
        NetworkArcDocument(source=f"pu_{head}", to=f"wwtp_{head}", cost=2.0, loss=1.0, config="WWTP"),
        NetworkArcDocument(source=f"wwtp_{head}", to="central_wwtp", cost=3.0, loss=1.0, config="WWTP"),
        NetworkArcDocument(source=f"wwtp_{head}", to=f"ipr_{head}", cost=8.0, loss=1.0, config="IPR"),
        NetworkArcDocument(source=f"ipr_{head}", to=f"res_{head}", cost=20.0, loss=0.98, config="IPR"),
    ]
    for k, zone in enumerate(zones):
        arcs.append(
            NetworkArcDocument(source=f"wwtp_{head}", to=f"nu_{zone}", cost=12.0 + 3.0 * k, loss=0.98, config="WWTP")
        )

    return NetworkDocument(
        name=name,
        allotment_share={"high": 0.55, "low": 0.5},
        nodes=nodes,
        arcs=arcs,
    )
