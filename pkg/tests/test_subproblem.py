import numpy as np
import pytest

from app.core.exceptions import (
    CutPoolLimitError,
    InfeasibleNodeError,
    LogicError,
    ShapeError,
)
from app.services.lp_backend import HighsBackend
from app.services.scenario_tree import StageData
from app.services.subproblem import Cut, CutKind, CutLayout, assemble


def box_data(cost: float = 1.0, cap: float = 10.0) -> StageData:
    """One variable in [0, cap], no rows."""
    return StageData(A=np.zeros((0, 1)), B=np.zeros((0, 0)), b=np.zeros(0), c=[cost], ub=[cap])


def opt_cut(gradient, intercept, theta_index=0, iteration=1):
    return Cut(CutKind.OPTIMALITY, np.asarray(gradient, dtype=float), intercept, 0, iteration, (1,), theta_index)


def feas_cut(gradient, intercept):
    return Cut(CutKind.FEASIBILITY, np.asarray(gradient, dtype=float), intercept, 0, 1, (1,))


# ============== Assembly ==============

def test_leaf_has_only_structural_columns():
    sub = assemble(3, StageData(A=[[1.0]], B=[[1.0]], b=[0.0], c=[2.0]), 0, CutLayout.SINGLE, 0.0)
    lp = sub.build_lp(np.array([1.0]))
    assert lp.n_vars == 1
    assert lp.n_ub == 0
    assert lp.lb == pytest.approx([0.0])
    with pytest.raises(LogicError):
        sub.add_cut(opt_cut([0.0, 0.0, 0.0], 1.0))


def test_interior_single_layout_has_one_initial_cut():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0, lambda_min=1e-5)
    assert sub.n_cols == 4
    assert len(sub.optimality_cuts) == 1
    lp = sub.build_lp(np.zeros(0))
    assert lp.col_names == ["x0", "lambda", "mu", "theta0"]
    assert lp.lb[sub.lambda_col] == 1e-5
    assert lp.lb[sub.mu_col] == -np.inf
    assert lp.c[sub.theta_col(0)] == 1.0


def test_multi_layout_weights_theta_by_q():
    q = np.array([0.2, 0.3, 0.5])
    sub = assemble(0, box_data(), 3, CutLayout.MULTI, -50.0, descendant_q=q)
    assert sub.n_theta == 3
    assert len(sub.optimality_cuts) == 3
    lp = sub.build_lp(np.zeros(0))
    assert lp.c[sub.theta_col(0):] == pytest.approx(q)
    sol = sub.solve(np.zeros(0))
    assert sol.theta == pytest.approx([-50.0] * 3)
    assert sol.objective == pytest.approx(-50.0)


def test_probability_count_must_match():
    with pytest.raises(ShapeError):
        assemble(0, box_data(), 3, CutLayout.MULTI, 0.0, descendant_q=[0.5, 0.5])


# ============== Cuts ==============

def test_constant_cut_lifts_theta():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0)
    assert sub.add_cut(opt_cut([0.0, 0.0, 0.0], 5.0))
    sol = sub.solve(np.zeros(0))
    assert sol.theta == pytest.approx([5.0])
    assert sol.x == pytest.approx([0.0])
    assert sol.approximation == pytest.approx(5.0)


def test_duplicate_cut_is_ignored():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0)
    cut = opt_cut([-1.0, 0.0, 0.0], 4.0)
    assert sub.add_cut(cut)
    before = sub.solve(np.zeros(0))
    assert not sub.add_cut(cut)
    after = sub.solve(np.zeros(0))
    assert sub.cut_count == 2
    assert after.objective == pytest.approx(before.objective)


def test_feasibility_cut_removes_the_iterate():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0)
    assert sub.solve(np.zeros(0)).x == pytest.approx([0.0])
    cut = feas_cut([-1.0, 0.0, 0.0], 2.0)
    assert cut.value_at(np.array([0.0, 1e-5, 0.0])) > 0
    sub.add_cut(cut)
    sol = sub.solve(np.zeros(0))
    assert sol.x == pytest.approx([2.0])
    assert cut.value_at(sol.point) <= 1e-9


def test_feasibility_cut_needs_a_pool():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0, has_feasibility_pool=False)
    with pytest.raises(LogicError):
        sub.add_cut(feas_cut([-1.0, 0.0, 0.0], 2.0))


def test_cut_dimension_is_checked():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0)
    with pytest.raises(ShapeError):
        sub.add_cut(opt_cut([1.0, 0.0], 1.0))
    with pytest.raises(ShapeError):
        sub.add_cut(opt_cut([1.0, 0.0, 0.0], 1.0, theta_index=1))


def test_cut_pool_cap():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0, max_cuts=2)
    sub.add_cut(opt_cut([0.0, 0.0, 0.0], 1.0))
    with pytest.raises(CutPoolLimitError):
        sub.add_cut(opt_cut([0.0, 0.0, 0.0], 2.0))


def test_rho_change_resets_the_pools():
    sub = assemble(0, box_data(), 2, CutLayout.SINGLE, 0.0, rho=0.1)
    sub.add_cut(opt_cut([0.0, 0.0, 0.0], 1.0))
    sub.add_cut(feas_cut([-1.0, 0.0, 0.0], 2.0))
    sub.set_rho(0.1)
    assert sub.cut_count == 3
    sub.set_rho(0.2)
    assert sub.cut_count == 1
    assert sub.rho == 0.2


def test_cut_dump_has_one_line_per_cut():
    sub = assemble(7, box_data(), 2, CutLayout.SINGLE, 0.0)
    sub.add_cut(Cut(CutKind.OPTIMALITY, np.array([1.0, 0.5, 0.0]), -2.0, 7, 3, (8, 9)))
    lines = sub.dump_cuts().splitlines()
    assert len(lines) == 2
    assert lines[1] == "optimality node=7 iter=3 theta=0 sources=[8,9] grad=[1 0.5 0] intercept=-2"


def test_theta_equals_the_tightest_cut(rng):
    sub = assemble(0, box_data(cost=0.5), 2, CutLayout.SINGLE, 0.0)
    for k in range(6):
        gradient = np.array([rng.uniform(-2.0, 2.0), rng.uniform(0.1, 1.0), rng.uniform(-0.5, 0.5)])
        sub.add_cut(opt_cut(gradient, float(rng.uniform(-1.0, 3.0)), iteration=k + 1))
    sol = sub.solve(np.zeros(0))
    tightest = max(cut.value_at(sol.point) for cut in sub.optimality_cuts)
    assert sol.theta[0] == pytest.approx(tightest, abs=1e-7)


# ============== Solve ==============

@pytest.mark.parametrize("backend", [None, HighsBackend()], ids=["bundled", "highs"])
def test_leaf_copies_the_ancestor_decision(backend):
    sub = assemble(1, StageData(A=[[1.0]], B=[[1.0]], b=[0.0], c=[2.0]), 0, CutLayout.SINGLE, 0.0)
    sol = sub.solve(np.array([3.0]), backend=backend)
    assert sol.objective == pytest.approx(6.0)
    assert sol.pi_eq == pytest.approx([2.0])
    assert sol.pi_B == pytest.approx([2.0])
    assert sol.lam is None


def test_binding_capacity_row_has_nonpositive_dual():
    data = StageData(
        A=np.zeros((0, 1)), B=np.zeros((0, 0)), b=np.zeros(0), c=[-1.0],
        A_ub=[[1.0]], b_ub=[4.0],
    )
    sol = assemble(1, data, 0, CutLayout.SINGLE, 0.0).solve(np.zeros(0))
    assert sol.x == pytest.approx([4.0])
    assert sol.pi_ub == pytest.approx([-1.0])


def test_coupled_capacity_gradient():
    data = StageData(
        A=np.zeros((0, 1)), B=np.zeros((0, 1)), b=np.zeros(0), c=[-2.0],
        A_ub=[[1.0]], B_ub=[[1.0]], b_ub=[1.0],
    )
    sol = assemble(1, data, 0, CutLayout.SINGLE, 0.0).solve(np.array([3.0]))
    assert sol.x == pytest.approx([4.0])
    assert sol.pi_B == pytest.approx([-2.0])


def test_warm_solve_after_new_cut_matches_cold():
    data = StageData(A=[[1.0, 1.0]], B=np.zeros((1, 0)), b=[6.0], c=[1.0, 2.0], ub=[4.0, 10.0])
    warm = assemble(0, data, 2, CutLayout.SINGLE, 0.0)
    warm.solve(np.zeros(0))
    cut = opt_cut([-1.0, 0.0, 0.0, 0.0], 3.0)
    warm.add_cut(cut)
    cold = assemble(0, data, 2, CutLayout.SINGLE, 0.0)
    cold.add_cut(cut)
    assert warm.solve(np.zeros(0)).objective == pytest.approx(cold.solve(np.zeros(0)).objective, abs=1e-8)


def test_infeasible_node_raises():
    sub = assemble(2, StageData(A=[[1.0]], B=[[1.0]], b=[0.0], c=[1.0]), 0, CutLayout.SINGLE, 0.0)
    with pytest.raises(InfeasibleNodeError):
        sub.solve(np.array([-1.0]))


def test_ancestor_dimension_is_checked():
    sub = assemble(2, StageData(A=[[1.0]], B=[[1.0]], b=[0.0], c=[1.0]), 0, CutLayout.SINGLE, 0.0)
    with pytest.raises(ShapeError):
        sub.solve(np.array([1.0, 2.0]))
