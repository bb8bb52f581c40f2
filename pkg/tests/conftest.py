import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pytest

from app.config import Settings
from app.services.scenario_tree import ScenarioTree, StageData, TreeNode, build_balanced

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

DIVERGENCES = ["mchi2", "kl", "hellinger", "burg"]


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MDRO_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set MDRO_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# ============== Instance builders ==============

def newsvendor_tree(
    demands: Sequence[float],
    q: Optional[Sequence[float]] = None,
    rho: float = 0.5,
    order_cost: float = 1.0,
    shortage: Optional[Sequence[float]] = None,
    holding: Optional[Sequence[float]] = None,
    capacity: float = 10.0,
    second_order: Optional[float] = None,
) -> ScenarioTree:
    """
    Two stages: order x ∈ [0, capacity] at `order_cost`; leaf k pays
    shortage_k·(d_k − x)+ + holding_k·(x − d_k)+. With `second_order` the
    root gets a second product that covers half a unit per unit at that cost.
    """
    n = len(demands)
    q = np.full(n, 1.0 / n) if q is None else np.asarray(q, dtype=float)
    shortage = [3.0] * n if shortage is None else shortage
    holding = [0.5] * n if holding is None else holding

    if second_order is None:
        root = StageData(
            A=np.zeros((0, 1)), B=np.zeros((0, 0)), b=np.zeros(0),
            c=[order_cost], ub=[capacity], columns=["order"],
        )
        coupling = [[-1.0]]
    else:
        root = StageData(
            A=np.zeros((0, 2)), B=np.zeros((0, 0)), b=np.zeros(0),
            c=[order_cost, second_order], ub=[capacity, capacity], columns=["order", "backup"],
        )
        coupling = [[-1.0, -0.5]]

    stage_data = {"root": root}
    nodes = [TreeNode(0, 1, None, 1.0, "root")]
    for k, d in enumerate(demands):
        ref = f"leaf{k}"
        stage_data[ref] = StageData(
            A=[[1.0, -1.0]], B=coupling, b=[d], c=[shortage[k], holding[k]],
            columns=["short", "excess"],
        )
        nodes.append(TreeNode(k + 1, 2, 0, float(q[k]), ref))
    return ScenarioTree(nodes, [rho], stage_data, name="newsvendor")


def random_newsvendor(rng: np.random.Generator, n: int, rho: float, two_products: bool = False) -> ScenarioTree:
    return newsvendor_tree(
        demands=rng.uniform(1.0, 9.0, n).round(3),
        q=rng.dirichlet(np.full(n, 2.0)),
        rho=rho,
        order_cost=round(float(rng.uniform(0.5, 1.5)), 3),
        shortage=rng.uniform(2.0, 5.0, n).round(3),
        holding=rng.uniform(0.0, 1.0, n).round(3),
        second_order=round(float(rng.uniform(0.5, 1.5)), 3) if two_products else None,
    )


def inventory_tree(branching: Sequence[int], rng: np.random.Generator, rho: float = 0.1) -> ScenarioTree:
    """
    Balanced multistage inventory chain. Every stage decides (buy, short, stock)
    with buy + short − stock = d − stock_prev; short is always available.
    """
    T = len(branching) + 1
    weights: dict[tuple[int, ...], np.ndarray] = {}

    def prob_rule(path: tuple[int, ...]) -> float:
        parent = path[:-1]
        if parent not in weights:
            weights[parent] = rng.dirichlet(np.full(branching[len(parent)], 2.0))
        return float(weights[parent][path[-1]])

    def data_rule(path: tuple[int, ...]) -> StageData:
        demand = float(rng.uniform(1.0, 6.0))
        buy_cost = float(rng.uniform(0.8, 1.6))
        if not path:
            return StageData(
                A=[[1.0, 1.0, -1.0]], B=np.zeros((1, 0)), b=[demand],
                c=[buy_cost, 4.0, 0.2], ub=[10.0, None, None], columns=["buy", "short", "stock"],
            )
        return StageData(
            A=[[1.0, 1.0, -1.0]], B=[[0.0, 0.0, -1.0]], b=[demand],
            c=[buy_cost, 4.0, 0.2], ub=[10.0, None, None], columns=["buy", "short", "stock"],
        )

    return build_balanced(T, branching, prob_rule=prob_rule, data_rule=data_rule, rho_rule=rho, name="inventory")


# ============== Fixtures ==============

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20180101)


@pytest.fixture
def settings(tmp_path) -> Settings:
    return Settings(output_dir=tmp_path / "results", threads=1)


@pytest.fixture
def toy_tree_path() -> Path:
    return DATA_DIR / "toy_tree.json"


@pytest.fixture
def network_path() -> Path:
    return DATA_DIR / "two_zone_network.json"
