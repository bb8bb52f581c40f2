from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import IngestionError, InputError, ModelError
from app.schemas.network import NetworkArcDocument, NetworkDocument, NetworkNodeDocument
from app.schemas.run import RunOptions
from app.services.benders import NestedBenders, SolverOptions
from app.services.divergence import parse_divergence
from app.services.lp_backend import get_backend
from app.services.runner import resolve_radii
from app.services.scenario_tree import validate
from app.services.subproblem import CutLayout, assemble
from app.services.water_model import (
    AllotmentCondition,
    DemandKnobs,
    DemandScenario,
    InfraOption,
    InfrastructureConfig,
    ShortageReport,
    StageLayout,
    TreeScale,
    WaterNetwork,
    WaterStage,
    build_stage_lp,
    build_water_tree,
    discount_factor,
    generate_demands,
    generate_network,
    load_demands,
    load_network,
    save_network,
    shortage_report,
    stage_years,
    tier_allotment,
    tier_probabilities,
)


def network(nodes, arcs=(), **fields) -> WaterNetwork:
    return WaterNetwork(
        NetworkDocument(
            nodes=[NetworkNodeDocument(**n) for n in nodes],
            arcs=[NetworkArcDocument(**a) for a in arcs],
            **fields,
        )
    )


def stage(demand: float, cap: float = 0.0, year: int = 2018, user: str = "u") -> WaterStage:
    return WaterStage(stage=1, years=[year], demands={user: [demand]}, cap=[cap])


def stage_cost(data) -> float:
    return assemble(0, data, 0, CutLayout.SINGLE, 0.0).solve(np.zeros(0)).objective


DUMMY_ONLY = [{"id": "D", "type": "D"}, {"id": "u", "type": "NU"}]
CAP_TO_USER = DUMMY_ONLY + [{"id": "CAP", "type": "CAP"}]


@pytest.fixture
def two_zone(network_path) -> WaterNetwork:
    return load_network(network_path)


@pytest.fixture
def small_demands(tmp_path, two_zone):
    scale = TreeScale.parse("reduced:1")
    generate_demands(two_zone, tmp_path / "demands", scale.scenarios(), last_year=2022)
    return scale, load_demands(tmp_path / "demands", scale.scenarios())


# ============== Scalars ==============

def test_discount_factor():
    assert discount_factor(2018) == 1.0
    assert discount_factor(2050) == pytest.approx(0.28506, abs=1e-5)
    with pytest.raises(InputError):
        discount_factor(2000)


def test_tier_allotments():
    assert tier_allotment("Normal") == 144_000.0
    assert tier_allotment(AllotmentCondition.TIER3) == 119_318.0
    assert tier_allotment("Tier1") > tier_allotment("Tier2") > tier_allotment("Tier3")
    assert tier_allotment("Tier1") == round(144_000 * (1 - 0.1143))
    with pytest.raises(InputError):
        tier_allotment("Tier4")


def test_tier_probabilities():
    assert tier_probabilities(1) == pytest.approx([1.0, 0.0, 0.0, 0.0])
    assert tier_probabilities(2).tolist() == [0.6038, 0.0817, 0.0725, 0.2420]
    assert tier_probabilities(5).tolist() == [0.3663, 0.0805, 0.0532, 0.5000]
    for t in range(2, 6):
        assert tier_probabilities(t).sum() == pytest.approx(1.0, abs=2e-4)
    with pytest.raises(InputError):
        tier_probabilities(6)


def test_stage_years():
    assert stage_years(1) == [2018]
    assert stage_years(2) == list(range(2019, 2027))
    assert stage_years(5)[-1] == 2050
    assert stage_years(3, periods=2) == [2021, 2022]


# ============== Network ==============

def test_infrastructure_inclusion():
    ni, wwtp, ipr = (InfrastructureConfig(o) for o in ("NI", "WWTP", "IPR"))
    assert ni.includes(None)
    assert not ni.includes("WWTP")
    assert wwtp.includes("WWTP") and not wwtp.includes("IPR")
    assert ipr.includes("WWTP") and ipr.includes("IPR")
    assert ipr.option is InfraOption.IPR
    with pytest.raises(InputError):
        InfrastructureConfig("DESAL")


@pytest.mark.parametrize(
    "nodes,arcs,fragment",
    [
        (DUMMY_ONLY + [{"id": "u", "type": "PU"}], [], "duplicate"),
        (CAP_TO_USER + [{"id": "CAP2", "type": "CAP"}], [], "at most one CAP"),
        (CAP_TO_USER, [{"from": "u", "to": "CAP"}], "flows into the CAP"),
        (CAP_TO_USER, [{"from": "CAP", "to": "D"}], "dummy node"),
        (CAP_TO_USER, [{"from": "CAP", "to": "x"}], "unknown node 'x'"),
        (CAP_TO_USER + [{"id": "v", "type": "NU"}], [{"from": "u", "to": "v"}], "nonpotable user 'u'"),
        (CAP_TO_USER + [{"id": "p", "type": "PU"}], [{"from": "p", "to": "u"}], "no return flag"),
        (CAP_TO_USER + [{"id": "t", "type": "TP", "returns": True}], [], "non-PU node 't'"),
    ],
)
def test_network_validation(nodes, arcs, fragment):
    with pytest.raises(ModelError) as exc:
        network(nodes, arcs)
    assert fragment in exc.value.detail


def test_allotment_share_must_cover_both_populations():
    with pytest.raises(ModelError):
        network(DUMMY_ONLY, allotment_share={"high": 1.0})


def test_stage_dependent_allotment_share():
    net = network(DUMMY_ONLY, allotment_share={"high": [1.0, 0.9], "low": 0.5})
    assert net.share("high", 2) == 0.9
    assert net.share("low", 4) == 0.5
    assert net.mean_share(2) == pytest.approx(0.7)
    with pytest.raises(ModelError):
        net.share("high", 3)


def test_load_and_save_network(tmp_path, two_zone):
    assert two_zone.name == "two-zone"
    assert two_zone.cap.id == "CAP"
    assert two_zone.dummy.id == "D"
    assert [n.id for n in two_zone.demand_nodes()] == ["PU_C", "NU_C", "PU_D", "NU_D"]
    path = tmp_path / "copy.json"
    save_network(two_zone.document, path)
    assert load_network(path).document.model_dump() == two_zone.document.model_dump()


def test_load_network_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_network(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"nodes": [{"id": "a", "type": "XX"}], "arcs": []}')
    with pytest.raises(InputError):
        load_network(bad)


def test_active_arcs_follow_the_option(two_zone):
    counts = [len(two_zone.active_arcs(InfrastructureConfig(o))) for o in ("NI", "WWTP", "IPR")]
    assert counts == [15, 19, 21]


# ============== Stage LP ==============

def test_zero_demand_costs_nothing():
    assert stage_cost(build_stage_lp(network(DUMMY_ONLY), stage(0.0))) == pytest.approx(0.0, abs=1e-9)


def test_unserved_demand_goes_to_the_dummy():
    net = network(DUMMY_ONLY)
    assert stage_cost(build_stage_lp(net, stage(100.0))) == pytest.approx(80_000.0)
    assert stage_cost(build_stage_lp(net, stage(100.0, year=2019))) == pytest.approx(80_000.0 / 1.04)


@pytest.mark.parametrize("loss,expected", [(1.0, 32_000.0), (0.5, 56_000.0)])
def test_allotment_limits_delivery(loss, expected):
    net = network(CAP_TO_USER, [{"from": "CAP", "to": "u", "cost": 0.0, "loss": loss}])
    assert stage_cost(build_stage_lp(net, stage(100.0, cap=60.0))) == pytest.approx(expected)


def test_disconnected_user_without_dummy():
    with pytest.raises(ModelError):
        StageLayout(network([{"id": "u", "type": "NU"}]))


def test_stage_columns_and_storage_coupling():
    net = network(
        DUMMY_ONLY + [{"id": "r", "type": "RF", "initial_storage": 50.0}],
        [{"from": "r", "to": "u", "cost": 0.0}],
    )
    root = StageLayout(net, years=[2018])
    assert root.columns == ["flow[r->u,2018]", "storage[r,2018]", "release[r,2018]", "short[u,2018]"]
    assert root.B.shape == (2, 0)
    assert stage_cost(root.stage_data(stage(30.0))) == pytest.approx(0.0, abs=1e-9)
    assert stage_cost(root.stage_data(stage(80.0))) == pytest.approx(800.0 * 30.0)

    child = StageLayout(net, years=[2019, 2020], parent=root)
    column = child.B[:, root.storage[-1, 0]]
    assert sorted(column[column != 0]) == [-1.0, 1.0]
    assert np.count_nonzero(child.B) == 2


def test_stage_data_shapes():
    with pytest.raises(InputError):
        WaterStage(stage=2, years=[2019, 2020], demands={"u": [1.0]}, cap=[0.0, 0.0])
    with pytest.raises(InputError):
        WaterStage(stage=2, years=[2019], demands={"u": [-1.0]}, cap=[0.0])
    layout = StageLayout(network(DUMMY_ONLY))
    with pytest.raises(InputError):
        layout.stage_data(stage(1.0, user="v"))


def test_returning_user_sends_its_fraction_back(two_zone):
    layout = StageLayout(two_zone, years=[2018])
    demands = {"PU_C": [1000.0], "NU_C": [0.0], "PU_D": [0.0], "NU_D": [0.0]}
    b, _ = layout.rhs(WaterStage(stage=1, years=[2018], demands=demands, cap=[0.0]))
    returns = b[layout.return_rows[0]]
    assert returns == pytest.approx([400.0, 0.0])


# ============== Demand series ==============

def test_demand_scenario_filename():
    assert DemandScenario("rcp45", "MIROC5", "lower", "high").filename == "rcp45_MIROC5_lower_high.csv"


def test_generated_demands_start_from_base_demand(tmp_path, two_zone):
    scenario = DemandScenario("rcp26", "CSIRO", "higher", "low")
    paths = generate_demands(two_zone, tmp_path, [scenario], last_year=2030)
    assert [p.name for p in paths] == [scenario.filename]
    table = load_demands(tmp_path, [scenario])
    first = table.demand(scenario, [2018], ["PU_C", "NU_D"])
    assert first[0] == pytest.approx([30_000.0 * 1.08, 10_000.0 * 1.08], rel=1e-9)
    later = table.demand(scenario, [2030], ["PU_C"])
    assert later[0, 0] > first[0, 0]


def test_demand_generation_is_seeded(tmp_path, two_zone):
    scenario = DemandScenario("rcp85", "GFDL-CM3", "lower", "high")
    knobs = DemandKnobs(noise=0.05)
    one = generate_demands(two_zone, tmp_path / "a", [scenario], 2025, knobs, seed=3)[0]
    two = generate_demands(two_zone, tmp_path / "b", [scenario], 2025, knobs, seed=3)[0]
    assert one.read_bytes() == two.read_bytes()


def test_missing_demand_series(tmp_path):
    with pytest.raises(IngestionError) as exc:
        load_demands(tmp_path, [DemandScenario("rcp26", "CSIRO", "higher", "low")])
    assert "rcp26_CSIRO_higher_low.csv" in exc.value.detail


@pytest.mark.parametrize(
    "frame",
    [
        pd.DataFrame({"year": [2018], "node": ["u"], "demand": [-1.0]}),
        pd.DataFrame({"year": [2018], "node": ["u"]}),
    ],
    ids=["negative", "missing-column"],
)
def test_bad_demand_series(tmp_path, frame):
    scenario = DemandScenario("rcp26", "CSIRO", "higher", "low")
    frame.to_csv(tmp_path / scenario.filename, index=False)
    with pytest.raises(IngestionError):
        load_demands(tmp_path, [scenario])


def test_demand_lookup_outside_the_series(small_demands):
    scale, table = small_demands
    with pytest.raises(IngestionError):
        table.demand(scale.scenarios()[0], [2099], ["PU_C"])
    with pytest.raises(IngestionError):
        table.demand(DemandScenario("rcp85", "MIROC5", "lower", "low"), [2018], ["PU_C"])


# ============== Tree scale ==============

def test_tree_scale_parsing():
    assert len(TreeScale.parse("full").pairs()) == 24
    assert len(TreeScale.parse("full").scenarios()) == 96
    reduced = TreeScale.parse("reduced:1")
    assert reduced.pairs() == [("rcp26", "CSIRO")]
    assert reduced.label == "reduced:1"
    assert len(TreeScale.parse("reduced:3").pairs()) == 3
    with pytest.raises(InputError):
        TreeScale.parse("half")
    with pytest.raises(InputError):
        TreeScale.parse("reduced:0").pairs()


# ============== Water tree ==============

def test_two_stage_water_tree(two_zone, small_demands):
    scale, table = small_demands
    tree = build_water_tree(two_zone, table, scale=scale, stages=2, periods=1, rho=0.1)
    assert len(tree) == 17
    assert len(tree.leaves()) == 16
    assert validate(tree) == []
    leaf = tree.data(tree.leaves()[0]).meta
    assert leaf["rcp"] == "rcp26" and leaf["model"] == "CSIRO"
    assert leaf["allotment"] in {c.value for c in AllotmentCondition}
    assert tree.data(0).meta["allotment"] == "Normal"


def test_later_stages_renormalize_probabilities(two_zone, small_demands):
    scale, table = small_demands
    tree = build_water_tree(two_zone, table, scale=scale, stages=3, periods=1, rho=[0.1, 0.2])
    assert len(tree) == 1 + 16 + 16 * 8
    assert validate(tree) == []
    assert tree.rho == pytest.approx((0.1, 0.2))
    child = tree.children(0)[0]
    assert sum(tree.node(k).conditional_prob for k in tree.children(child)) == pytest.approx(1.0, abs=1e-12)


def test_water_tree_stage_bounds(two_zone, small_demands):
    scale, table = small_demands
    with pytest.raises(InputError):
        build_water_tree(two_zone, table, scale=scale, stages=6)


@pytest.mark.parametrize("backend", ["bundled", "highs"])
def test_infrastructure_options_are_ordered(backend, two_zone, small_demands):
    scale, table = small_demands
    spec = parse_divergence("kl")
    states = {}
    for option in ("NI", "WWTP", "IPR"):
        tree = build_water_tree(two_zone, table, InfrastructureConfig(option), scale, stages=2, periods=1, rho=0.1)
        states[option] = NestedBenders(tree, spec, SolverOptions(tol=1e-5, max_iter=300), get_backend(backend)).run()
        assert states[option].converged
    slack = 1e-6 * abs(states["NI"].upper_bound)
    assert states["IPR"].lower_bound <= states["WWTP"].upper_bound + slack
    assert states["WWTP"].lower_bound <= states["NI"].upper_bound + slack


# ============== Shortage report ==============

def test_shortage_report(tmp_path, two_zone, small_demands):
    scale, table = small_demands
    tree = build_water_tree(two_zone, table, scale=scale, stages=2, periods=1, rho=0.1)
    state = NestedBenders(tree, parse_divergence("kl"), SolverOptions(tol=1e-4, max_iter=300)).run()
    report = shortage_report(state, tree)

    assert len(report.scenarios) == 16
    assert report.scenarios["probability"].sum() == pytest.approx(1.0)
    assert (report.scenarios["shortage"] >= -1e-6).all()
    assert np.all(np.diff(report.cdf["cdf"].to_numpy()) >= 0)
    assert report.cdf["cdf"].iloc[-1] == pytest.approx(1.0)
    assert report.cdf_at(float(report.scenarios["shortage"].max())) == pytest.approx(1.0)
    assert report.dominates(report)
    assert report.breakdown["probability"].sum() == pytest.approx(1.0)
    assert set(report.breakdown["population"]) <= {"0H pop", "1H pop"}

    paths = report.write(tmp_path / "report")
    assert sorted(p.name for p in paths) == ["shortage_breakdown.csv", "shortage_cdf.csv", "shortage_scenarios.csv"]


def test_shortage_report_needs_an_incumbent(two_zone, small_demands):
    scale, table = small_demands
    tree = build_water_tree(two_zone, table, scale=scale, stages=2, periods=1)
    with pytest.raises(InputError):
        shortage_report(SimpleNamespace(incumbent={}), tree)


def test_cdf_dominance():
    def report(shortages):
        scenarios = pd.DataFrame({"probability": [0.5, 0.5], "shortage": shortages})
        mass = scenarios.groupby("shortage")["probability"].sum()
        cdf = pd.DataFrame({"shortage": mass.index.to_numpy(), "cdf": mass.cumsum().to_numpy()})
        return ShortageReport(scenarios, cdf, pd.DataFrame())

    low, high = report([0.0, 10.0]), report([5.0, 20.0])
    assert low.cdf_at(10.0) == 1.0
    assert high.cdf_at(10.0) == 0.5
    assert low.dominates(high)
    assert not high.dominates(low)


# ============== Network generator ==============

def test_generated_network_is_valid():
    net = WaterNetwork(generate_network())
    assert len(net.of_type("RF")) == 5
    assert len(net.demand_nodes()) == 16
    for option in ("NI", "WWTP", "IPR"):
        layout = StageLayout(net, InfrastructureConfig(option))
        assert layout.n_cols > 0
    single = WaterNetwork(generate_network(zones=("C",)))
    assert [n.id for n in single.of_type("RF")] == ["rf_C"]
    with pytest.raises(InputError):
        generate_network(zones=())


@pytest.mark.slow
def test_desk_scale_instance(tmp_path):
    net = WaterNetwork(generate_network())
    scale = TreeScale.parse("reduced:2")
    generate_demands(net, tmp_path, scale.scenarios())
    table = load_demands(tmp_path, scale.scenarios())
    spec = parse_divergence("kl")

    states, reports = {}, {}
    for option in ("NI", "WWTP", "IPR"):
        tree = build_water_tree(net, table, InfrastructureConfig(option), scale, stages=5)
        tree = resolve_radii(tree, spec, RunOptions(divergence="kl", confidence=0.95))
        state = NestedBenders(tree, spec, SolverOptions(tol=1e-3, max_iter=500)).run()
        assert state.converged
        for case in state.worst_case.values():
            assert case.sum_residual <= 1e-3
            assert case.divergence_residual <= 1e-6
        states[option] = state
        reports[option] = shortage_report(state, tree)

    assert len(tree.leaves()) == 16_384
    slack = 1e-3 * abs(states["NI"].upper_bound)
    assert states["IPR"].lower_bound <= states["WWTP"].upper_bound + slack
    assert states["WWTP"].lower_bound <= states["NI"].upper_bound + slack
    assert reports["IPR"].dominates(reports["NI"])
