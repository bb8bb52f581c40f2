import math

import numpy as np
import pytest

from app.core.exceptions import InputError, ShapeError
from app.services.lp_backend import (
    BundledSimplex,
    HighsBackend,
    LinearProgram,
    LpStatus,
    dump_lp,
    get_backend,
    solve_lp,
)

BACKENDS = [BundledSimplex(), HighsBackend()]


def random_lp(rng: np.random.Generator) -> LinearProgram:
    """Dense LP with a feasible box-bounded region."""
    n = int(rng.integers(2, 13))
    m_ub = int(rng.integers(1, 8))
    m_eq = int(rng.integers(0, 3))
    x0 = rng.uniform(0.0, 5.0, n)
    A_ub = rng.normal(size=(m_ub, n))
    b_ub = A_ub @ x0 + rng.uniform(0.0, 2.0, m_ub)
    A_eq = rng.normal(size=(m_eq, n)) if m_eq else None
    b_eq = A_eq @ x0 if m_eq else None
    return LinearProgram(
        c=rng.normal(size=n), A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub, ub=np.full(n, 10.0)
    )


def assert_kkt(lp: LinearProgram, sol, tol: float = 1e-6):
    x = sol.x
    assert np.all(x >= lp.lb - 1e-7) and np.all(x <= lp.ub + 1e-7)
    if lp.n_eq:
        assert np.allclose(lp.A_eq @ x, lp.b_eq, atol=1e-7)
    if lp.n_ub:
        slack = lp.b_ub - lp.A_ub @ x
        assert np.all(slack >= -1e-7)
        assert np.all(sol.dual_ub <= 1e-9)
        assert np.abs(sol.dual_ub * slack).max() <= tol
    reduced = lp.c - lp.A_eq.T @ sol.dual_eq - lp.A_ub.T @ sol.dual_ub
    at_lower = x <= lp.lb + 1e-7
    at_upper = x >= lp.ub - 1e-7
    assert np.all(reduced[at_lower & ~at_upper] >= -tol)
    assert np.all(reduced[at_upper & ~at_lower] <= tol)
    interior = ~at_lower & ~at_upper
    assert np.all(np.abs(reduced[interior]) <= tol)


# ============== Hand-built programs ==============

@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_single_equality(backend):
    sol = solve_lp(LinearProgram(c=[1.0], A_eq=[[1.0]], b_eq=[3.0]), backend=backend)
    assert sol.status is LpStatus.OPTIMAL
    assert sol.x == pytest.approx([3.0])
    assert sol.objective == pytest.approx(3.0)
    assert sol.dual_eq == pytest.approx([1.0])


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_binding_inequality_has_nonpositive_dual(backend):
    sol = solve_lp(LinearProgram(c=[-1.0, -1.0], A_ub=[[1.0, 1.0]], b_ub=[1.0]), backend=backend)
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(-1.0)
    assert sol.dual_ub == pytest.approx([-1.0])


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_infeasible_system(backend):
    lp = LinearProgram(c=[1.0], A_ub=[[-1.0]], b_ub=[-1.0], ub=[0.0])
    assert solve_lp(lp, backend=backend).status is LpStatus.INFEASIBLE


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_unbounded_ray(backend):
    lp = LinearProgram(c=[-1.0, 0.0], A_ub=[[0.0, 1.0]], b_ub=[1.0])
    assert solve_lp(lp, backend=backend).status is LpStatus.UNBOUNDED


def test_free_variable_with_lower_row():
    lp = LinearProgram(c=[1.0], A_ub=[[-1.0]], b_ub=[2.0], lb=[-math.inf])
    sol = solve_lp(lp)
    assert sol.x == pytest.approx([-2.0])
    assert sol.dual_ub == pytest.approx([-1.0])


def test_shape_validation():
    with pytest.raises(ShapeError):
        LinearProgram(c=[1.0, 1.0], A_eq=[[1.0]], b_eq=[1.0])
    with pytest.raises(ShapeError):
        LinearProgram(c=[1.0], lb=[2.0], ub=[1.0])
    with pytest.raises(ShapeError):
        LinearProgram(c=[math.nan])


def test_unknown_backend():
    with pytest.raises(InputError):
        get_backend("cplex")


# ============== Random instances ==============

def test_bundled_matches_highs_on_random_lps(rng):
    bundled, highs = BundledSimplex(), HighsBackend()
    for _ in range(200):
        lp = random_lp(rng)
        ours = bundled.solve(lp)
        reference = highs.solve(lp)
        assert ours.status is reference.status is LpStatus.OPTIMAL
        assert ours.objective == pytest.approx(reference.objective, abs=1e-6, rel=1e-9)
        assert_kkt(lp, ours)


def test_warm_start_after_adding_a_cut(rng):
    bundled = BundledSimplex()
    for _ in range(50):
        lp = random_lp(rng)
        first = bundled.solve(lp)
        assert first.basis is not None

        row = rng.normal(size=lp.n_vars)
        rhs = float(row @ first.x) - 0.5
        cut = LinearProgram(
            c=lp.c, A_eq=lp.A_eq, b_eq=lp.b_eq,
            A_ub=np.vstack([lp.A_ub, row]), b_ub=np.append(lp.b_ub, rhs),
            ub=lp.ub,
        )
        cold = bundled.solve(cut)
        warm = bundled.solve(cut, warm_start=first.basis.extended(cut.n_ub))
        assert warm.status is cold.status
        if cold.status is LpStatus.OPTIMAL:
            assert warm.objective == pytest.approx(cold.objective, abs=1e-8)


def test_basis_cannot_shrink():
    sol = solve_lp(LinearProgram(c=[-1.0, -1.0], A_ub=[[1.0, 1.0], [1.0, 0.0]], b_ub=[1.0, 0.5]))
    with pytest.raises(InputError):
        sol.basis.extended(1)


# ============== Text dump ==============

def test_dump_lp_uses_stable_names():
    lp = LinearProgram(
        c=[1.0, -2.0], A_eq=[[1.0, 1.0]], b_eq=[4.0], A_ub=[[0.0, 1.0]], b_ub=[3.0],
        lb=[0.0, -math.inf], ub=[5.0, math.inf],
        col_names=["buy", "sell"], row_names_eq=["balance"], name="toy",
    )
    text = dump_lp(lp)
    assert text.splitlines()[0] == "\\ toy"
    assert " obj: + 1 buy - 2 sell" in text
    assert " balance: + 1 buy + 1 sell = 4" in text
    assert " ub0: + 1 sell <= 3" in text
    assert " 0 <= buy <= 5" in text
    assert " sell free" in text
    assert text.endswith("End\n")
    assert dump_lp(lp) == text
