import math

import numpy as np
import pytest
import scipy.sparse as sp

from cutflow.cut import build_cut_model
from cutflow.errors import NonconvergenceError, SolverError
from cutflow.flow import FlowParams, assemble_flow
from cutflow.forms import build_context
from cutflow.grid import build_mesh
from cutflow.solve import (SolveConfig, TimeSlot, linear_solve, march,
                           newton_solve, steady_solve)

from fixtures_common import channel_regions


# --- newton -------------------------------------------------------------------

def test_newton_linear_problem_one_iteration():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, -2.0])

    def assemble(x):
        return A @ x - b, A

    x, trace = newton_solve(assemble, np.zeros(2))
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-12)
    assert len(trace) == 2  # initial residual + converged check


def test_newton_scalar_quadratic():
    # x^2 - 4 = 0 from x0 = 3: quadratic convergence to 2
    def assemble(x):
        return np.array([x[0] ** 2 - 4.0]), np.array([[2.0 * x[0]]])

    x, trace = newton_solve(assemble, np.array([3.0]), tol=1e-14,
                            abs_floor=1e-13)
    assert abs(x[0] - 2.0) < 1e-12
    assert len(trace) <= 6  # ~5 iterations for 1e-12
    # strictly decreasing residuals after the first iterate
    assert all(trace[i + 1] < trace[i] for i in range(1, len(trace) - 1))


def test_newton_nonconvergence_carries_trace():
    def assemble(x):
        return np.array([1.0]), np.array([[1e-30]])

    with pytest.raises(NonconvergenceError) as exc:
        newton_solve(assemble, np.array([0.0]), max_iter=3)
    assert len(exc.value.trace) >= 1


# --- linear solvers -------------------------------------------------------------

def test_linear_identity_and_spd():
    b = np.array([3.0, -1.0, 2.5])
    np.testing.assert_allclose(linear_solve(sp.eye(3).tocsc(), b), b, atol=1e-15)
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    x = linear_solve(A, np.array([1.0, 2.0]))
    np.testing.assert_allclose(A @ x, [1.0, 2.0], atol=1e-14)


def test_linear_random_sparse_spd():
    rng = np.random.default_rng(0)
    n = 500
    B = sp.random(n, n, density=0.01, random_state=0, format="csr")
    A = (B @ B.T + sp.eye(n) * n * 0.05).tocsc()
    b = rng.normal(size=n)
    x = linear_solve(A, b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10
    x_it = linear_solve(A, b, method="iterative", tol=1e-10)
    assert np.linalg.norm(x - x_it) / np.linalg.norm(x) < 1e-8


def test_linear_singular_raises():
    A = sp.csc_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SolverError):
        linear_solve(A, np.array([1.0, 0.0]))


# --- time marching ---------------------------------------------------------------

def _ode_make(slot):
    # du/dt = -u as a residual: alpha u + hist + u = 0
    def assemble(x):
        return slot.alpha * x + slot.hist + x, np.array([[slot.alpha + 1.0]])
    return assemble


def test_march_matches_exponential_second_order():
    errs = []
    for dt in (0.1, 0.05, 0.025):
        cfg = SolveConfig(dt=dt, n_steps=round(1.0 / dt), scheme="bdf2")
        states, traces = march(_ode_make, np.array([1.0]), cfg)
        errs.append(abs(states[-1][0] - math.exp(-1.0)))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    for order in orders:
        assert 1.8 <= order <= 2.2


def test_march_constant_solution_exact():
    # du/dt = 0: residual alpha u + hist
    def make(slot):
        return lambda x: (slot.alpha * x + slot.hist, np.array([[slot.alpha]]))

    cfg = SolveConfig(dt=0.2, n_steps=7, scheme="bdf2")
    states, _ = march(make, np.array([0.73]), cfg)
    for s in states:
        assert s[0] == pytest.approx(0.73, abs=1e-14)


def test_march_abort_reports_step():
    calls = {"n": 0}

    def make(slot):
        def assemble(x):
            calls["n"] += 1
            if slot.t > 0.25:  # third step fails
                return np.array([1.0]), np.array([[1e-30]])
            return slot.alpha * x + slot.hist + x, np.array([[slot.alpha + 1.0]])
        return assemble

    cfg = SolveConfig(dt=0.1, n_steps=10, scheme="bdf2", max_newton=3)
    with pytest.raises(NonconvergenceError) as exc:
        march(make, np.array([1.0]), cfg)
    assert exc.value.step == 3


def test_steady_solve_pseudo_transient_fallback():
    # arctan(x) = 0 from x0 = 2: plain Newton diverges, continuation converges
    def make(slot):
        def assemble(x):
            with np.errstate(over="ignore"):  # divergent iterates overflow x^2
                r = np.array([math.atan(x[0])])
                j = np.array([[1.0 / (1.0 + x[0] ** 2)]])
            if slot.alpha:
                r = r + slot.alpha * x + slot.hist
                j = j + np.array([[slot.alpha]])
            return r, j
        return assemble

    with pytest.raises((NonconvergenceError, SolverError)):
        newton_solve(make(TimeSlot()), np.array([2.0]), max_iter=20)
    x, trace = steady_solve(make, np.array([2.0]), SolveConfig(pseudo_dt0=0.5))
    assert abs(x[0]) < 1e-10


def test_stokes_cavity_converges_in_a_couple_iterations():
    # creeping lid-driven cavity: convection negligible, frozen penalties
    # keep Newton essentially linear
    from cutflow.conditions import BoundaryRegion, wall_regions
    mesh = build_mesh(((0, 0), (1, 1)), (8, 8))
    cm = build_cut_model(mesh, -np.ones(mesh.n_nodes))
    regions = wall_regions(mesh, [
        BoundaryRegion(name="lid", side="top", kind="velocity",
                       velocity=(1e-3, 0.0)),
        BoundaryRegion(name="vent", side="bottom", kind="traction",
                       span=(0.375, 0.625)),
    ])
    ctx = build_context(cm, regions)
    n = ctx.n
    params = FlowParams(rho=1.0, mu=10.0)
    make = lambda slot: (lambda x: assemble_flow(ctx, params, x, coeff_state=x,
                                                 slot=slot))
    U, trace = steady_solve(make, np.zeros(3 * n), SolveConfig())
    assert len(trace) <= 4  # residual evals: initial + <= 2 corrections + final


def test_warm_start_at_solution_converges_immediately():
    mesh = build_mesh(((0, 0), (2, 1)), (8, 4))
    cm = build_cut_model(mesh, -np.ones(mesh.n_nodes))
    ctx = build_context(cm, channel_regions(mesh, 1.0))
    n = ctx.n
    params = FlowParams(rho=1.0, mu=0.5)
    make = lambda slot: (lambda x: assemble_flow(ctx, params, x, coeff_state=x,
                                                 slot=slot))
    U, t1 = steady_solve(make, np.zeros(3 * n), SolveConfig())
    U2, t2 = steady_solve(make, U, SolveConfig())
    # warm start at the solution: at most a couple of corrections (the
    # convergence test is relative to the warm residual, so it polishes)
    assert len(t2) <= 3
    assert np.abs(U2 - U).max() < 1e-3 * np.abs(U).max()
