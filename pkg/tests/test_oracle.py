import math
from types import SimpleNamespace

import numpy as np
import pytest

from app.core.exceptions import InputError, OracleSizeError
from app.services.benders import NestedBenders, SolverOptions
from app.services.divergence import parse_divergence
from app.services.oracle import (
    GridSpec,
    InnerMaxProblem,
    bound_discipline,
    compare_to_oracle,
    inner_max_dual,
    inner_max_primal,
    mean_cvar_direct,
    risk_neutral_extensive,
    root_inner_max,
    two_stage_grid,
    verify,
)
from app.services.scenario_tree import load_tree
from tests.conftest import DIVERGENCES, inventory_tree, newsvendor_tree, random_newsvendor


def problem(values, q, rho, name):
    return InnerMaxProblem(np.asarray(values, dtype=float), np.asarray(q, dtype=float), rho, parse_divergence(name))


# ============== Inner maximization ==============

@pytest.mark.parametrize("name", ["mchi2", "kl"])
def test_tiny_radius_collapses_to_nominal(name):
    q = [0.2, 0.5, 0.3]
    v = [1.0, 0.0, 0.5]
    result = inner_max_dual(problem(v, q, 1e-12, name))
    assert result.value == pytest.approx(float(np.dot(q, v)), abs=1e-6)


def test_kl_large_radius_puts_all_mass_on_the_max():
    result = inner_max_dual(problem([0.0, 1.0], [0.5, 0.5], math.log(2.0) + 0.01, "kl"))
    assert result.value == pytest.approx(1.0, abs=1e-9)
    assert result.p == pytest.approx([0.0, 1.0])
    assert result.lam == 0.0


def test_constant_values():
    for name in DIVERGENCES:
        assert inner_max_dual(problem([2.5, 2.5], [0.3, 0.7], 0.4, name)).value == 2.5
        assert inner_max_primal(problem([2.5, 2.5], [0.3, 0.7], 0.4, name)).value == 2.5


@pytest.mark.parametrize("name", DIVERGENCES)
def test_dual_matches_primal(name, rng):
    for _ in range(10):
        n = int(rng.integers(2, 5))
        prob = problem(rng.uniform(0.0, 1.0, n), rng.dirichlet(np.full(n, 2.0)), float(rng.uniform(0.05, 0.5)), name)
        dual = inner_max_dual(prob)
        primal = inner_max_primal(prob, starts=20, seed=1)
        assert dual.value == pytest.approx(primal.value, abs=1e-5)


@pytest.mark.slow
@pytest.mark.parametrize("name", DIVERGENCES)
def test_dual_matches_primal_full_suite(name):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 7))
        prob = problem(rng.uniform(0.0, 1.0, n), rng.dirichlet(np.full(n, 2.0)), float(rng.uniform(0.01, 1.0)), name)
        assert inner_max_dual(prob).value == pytest.approx(inner_max_primal(prob).value, abs=1e-5)


@pytest.mark.parametrize("name", DIVERGENCES)
def test_value_is_monotone_in_radius_and_bracketed(name, rng):
    v = rng.uniform(0.0, 1.0, 4)
    q = rng.dirichlet(np.ones(4))
    values = [inner_max_dual(problem(v, q, rho, name)).value for rho in (0.01, 0.05, 0.2, 1.0)]
    assert all(a <= b + 1e-9 for a, b in zip(values, values[1:]))
    assert values[0] >= float(q @ v) - 1e-9
    assert values[-1] <= float(v.max()) + 1e-9


def test_burg_keeps_every_scenario():
    result = inner_max_primal(problem([0.0, 0.4, 1.0], [0.3, 0.3, 0.4], 0.3, "burg"), starts=20)
    assert np.all(result.p > 1e-9)


def test_suppression_behaviour():
    v, q = [0.0, 2.0, 10.0], [1 / 3, 1 / 3, 1 / 3]
    chi2 = inner_max_dual(problem(v, q, 1.5, "mchi2"))
    assert chi2.p[0] == 0.0
    assert np.all(chi2.p[1:] > 0)

    kl_small = inner_max_dual(problem(v, q, 0.5, "kl"))
    assert np.all(kl_small.p > 0)
    kl_large = inner_max_dual(problem(v, q, 1.5, "kl"))
    assert kl_large.p == pytest.approx([0.0, 0.0, 1.0])

    hellinger = inner_max_dual(problem(v, q, 1.5, "hellinger"))
    assert hellinger.p == pytest.approx([0.0, 0.0, 1.0])

    burg = inner_max_dual(problem(v, q, 1.5, "burg"))
    assert np.all(burg.p > 0)


def test_problem_validation():
    with pytest.raises(InputError):
        problem([1.0, 2.0], [1.0], 0.1, "kl")
    with pytest.raises(InputError):
        problem([1.0, 2.0], [0.5, 0.5], 0.0, "kl")
    with pytest.raises(InputError):
        problem([1.0, 2.0], [0.7, 0.7], 0.1, "kl")


def test_primal_size_cap():
    with pytest.raises(OracleSizeError):
        inner_max_primal(problem(np.arange(7.0), np.full(7, 1 / 7), 0.1, "kl"))


# ============== Mean-CVaR ==============

def test_mean_cvar_edge_cases():
    v, q = [1.0, 4.0, 2.0], [0.2, 0.3, 0.5]
    mean = float(np.dot(v, q))
    assert mean_cvar_direct(v, q, 0.0, 0.9) == pytest.approx(mean)
    assert mean_cvar_direct(v, q, 1.0, 1e-12) == pytest.approx(mean)
    assert mean_cvar_direct(v, q, 1.0, 0.7) == pytest.approx(4.0)
    with pytest.raises(InputError):
        mean_cvar_direct(v, q, 1.5, 0.9)


@pytest.mark.parametrize("kappa,alpha", [(0.3, 0.9), (1.0, 0.95)])
def test_mean_cvar_matches_interval_divergence(kappa, alpha, rng):
    for _ in range(100):
        n = int(rng.integers(2, 8))
        v = rng.uniform(-1.0, 3.0, n)
        q = rng.dirichlet(np.ones(n))
        result = inner_max_dual(problem(v, q, 0.5, f"cvar:{kappa},{alpha}"))
        assert result.value == pytest.approx(mean_cvar_direct(v, q, kappa, alpha), abs=1e-6)


def test_interval_primal_is_exact():
    v, q = [1.0, 4.0, 2.0], [0.2, 0.3, 0.5]
    assert inner_max_primal(problem(v, q, 0.5, "cvar:0.3,0.9")).value == pytest.approx(mean_cvar_direct(v, q, 0.3, 0.9))


# ============== Two-stage grid ==============

def test_deterministic_second_stage_is_a_plain_lp():
    tree = newsvendor_tree([4.0], q=[1.0])
    result = two_stage_grid(tree, parse_divergence("kl"))
    assert result.value == pytest.approx(4.0, abs=1e-6)
    assert result.x == pytest.approx([4.0], abs=1e-4)


def test_grid_needs_a_small_first_stage(rng):
    with pytest.raises(OracleSizeError):
        two_stage_grid(inventory_tree([2, 2], rng), parse_divergence("kl"))


def test_grid_with_tiny_radius_matches_extensive_form(rng):
    tree = random_newsvendor(rng, 3, rho=1e-12)
    grid = two_stage_grid(tree, parse_divergence("kl"), GridSpec(points=81))
    assert grid.value == pytest.approx(risk_neutral_extensive(tree), rel=1e-4)


# ============== Extensive form ==============

def test_extensive_single_scenario():
    assert risk_neutral_extensive(newsvendor_tree([6.0], q=[1.0])) == pytest.approx(6.0)


def test_extensive_node_cap(rng):
    with pytest.raises(OracleSizeError):
        risk_neutral_extensive(inventory_tree([2, 2], rng), node_cap=3)


def test_extensive_is_below_the_robust_value(rng):
    tree = random_newsvendor(rng, 4, rho=0.3)
    robust = two_stage_grid(tree, parse_divergence("kl")).value
    assert risk_neutral_extensive(tree) <= robust + 1e-9


# ============== Verification ==============

def record(iteration, lower, upper):
    return SimpleNamespace(iteration=iteration, lower_bound=lower, upper_bound=upper)


def test_compare_to_oracle():
    assert compare_to_oracle("grid", 10.0, 9.99, 10.0005, 1e-4).passed
    failed = compare_to_oracle("grid", 10.0, 10.5, 10.6, 1e-4)
    assert not failed.passed
    assert "z_L exceeds" in failed.detail
    assert compare_to_oracle("neutral", 8.0, 9.0, 10.0, 1e-4, mode="lower").passed


def test_bound_discipline():
    history = [record(1, 0.0, 20.0), record(2, 5.0, 12.0), record(3, 9.0, 10.0)]
    assert bound_discipline(history) == []
    assert bound_discipline(history, reference=10.0) == []
    problems = bound_discipline(history + [record(4, 8.0, 11.0)], reference=10.5)
    assert "z_L decreased at iteration 4" in problems
    assert "z_U increased at iteration 4" in problems
    assert "z_U below the oracle value at iteration 3" in problems


@pytest.mark.parametrize("name", ["kl", "hellinger"])
def test_verify_passes_on_a_converged_run(name, rng):
    tree = random_newsvendor(rng, 3, rho=0.4)
    spec = parse_divergence(name)
    state = NestedBenders(tree, spec, SolverOptions(tol=1e-6)).run()
    report = verify(tree, spec, state)
    assert report.passed, report.detail
    assert [c.oracle for c in report.comparisons] == ["two_stage_grid", "risk_neutral_extensive", "root_inner_max"]
    assert [c.mode for c in report.comparisons] == ["equal", "lower", "lower"]


def test_root_inner_max_is_seeded_and_bounded_by_z_upper(rng):
    tree = random_newsvendor(rng, 4, rho=0.3)
    spec = parse_divergence("burg")
    state = NestedBenders(tree, spec, SolverOptions(tol=1e-6)).run()
    first = root_inner_max(tree, spec, state, seed=11)
    again = root_inner_max(tree, spec, state, seed=11)
    assert first.passed
    assert first.oracle_value == again.oracle_value
    assert first.oracle_value <= state.upper_bound + 1e-9
    assert first.oracle_value == pytest.approx(state.upper_bound, rel=1e-3)


def test_root_inner_max_skips_wide_roots(rng):
    tree = newsvendor_tree(list(rng.uniform(1.0, 9.0, 7)), rho=0.2)
    spec = parse_divergence("kl")
    state = NestedBenders(tree, spec, SolverOptions(tol=1e-5)).run()
    report = verify(tree, spec, state, seed=3)
    skipped = report.comparisons[-1]
    assert skipped.oracle == "root_inner_max"
    assert skipped.passed is None
    assert skipped.detail.startswith("skipped:")


def test_verify_flags_an_injected_cut_fault(toy_tree_path):
    tree = load_tree(toy_tree_path).with_rho([1e-10, 1e-10])
    spec = parse_divergence("kl")
    state = NestedBenders(tree, spec, SolverOptions(tol=1e-4, max_iter=50, cut_fault=50.0)).run()
    report = verify(tree, spec, state)
    assert not report.passed
    assert report.comparisons[0].passed is None
    assert not report.comparisons[1].passed
