import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cutflow.criteria import CriterionSpec, ObjectiveTerm, ProblemSpec
from cutflow.cut import CUT
from cutflow.design import DesignVector
from cutflow.grid import node_support
from cutflow.sensitivities import (adjoint_transient, geometry_gradient,
                                   residual_phi_matrix, steady_adjoints,
                                   total_design_gradient)
from cutflow.solve import bdf_slot

from fixtures_common import bend_model


@pytest.fixture(scope="module")
def bend():
    model, problem, design = bend_model(divisions=(20, 20))
    result = model.solve_steady(design)
    problem.capture_normalization(result.crit_values)
    return model, problem, design, result


def test_state_independent_functional_has_zero_adjoints(bend):
    model, problem, design, result = bend
    adj = steady_adjoints(model, result, [{"Vf": 1.0}])[0]
    assert np.linalg.norm(adj.lam_flow) < 1e-12
    if adj.lam_psi is not None:
        assert np.linalg.norm(adj.lam_psi) < 1e-12


def test_total_gradient_matches_global_fd(bend):
    model, problem, design, result = bend
    Z, g, dZ, dg, rep = total_design_gradient(model, result, problem, design, 1.0)
    assert not rep.flagged_nodes
    rng = np.random.default_rng(3)
    mag = np.abs(dZ)
    pick = rng.choice(np.nonzero(mag > 0.05 * mag.max())[0], size=5, replace=False)
    step = 1e-5
    for idx in pick:
        dv = DesignVector(values=design.values.copy(), lower=design.lower,
                          upper=design.upper, n_nodal=design.n_nodal)
        dv.values[idx] += step
        Zp = problem.objective_value(model.solve_steady(dv).crit_values)
        dv.values[idx] -= 2 * step
        Zm = problem.objective_value(model.solve_steady(dv).crit_values)
        fd = (Zp - Zm) / (2 * step)
        assert abs(fd - dZ[idx]) / max(abs(fd), abs(dZ[idx])) < 1e-3


def test_constraint_gradient_matches_global_fd(bend):
    # the volume constraint gradient goes through geometry only
    model, problem, design, result = bend
    Z, g, dZ, dg, _ = total_design_gradient(model, result, problem, design, 1.0)
    con = problem.constraints[0]
    rng = np.random.default_rng(4)
    mag = np.abs(dg[0])
    pick = rng.choice(np.nonzero(mag > 0.05 * mag.max())[0], size=4, replace=False)
    step = 1e-5
    for idx in pick:
        dv = DesignVector(values=design.values.copy(), lower=design.lower,
                          upper=design.upper, n_nodal=design.n_nodal)
        dv.values[idx] += step
        gp = con.evaluate(model.solve_steady(dv).crit_values, 1.0)[0]
        dv.values[idx] -= 2 * step
        gm = con.evaluate(model.solve_steady(dv).crit_values, 1.0)[0]
        fd = (gp - gm) / (2 * step)
        assert abs(fd - dg[0][idx]) / max(abs(fd), abs(dg[0][idx])) < 1e-4


def test_surface_area_gradient_geometric_only(bend):
    # geometry-only criterion: dS/ds matches global FD at rel 1e-4
    model, problem, design, result = bend
    prob_s = ProblemSpec(criteria=model.criteria,
                         objective=[ObjectiveTerm(1.0, [(1.0, "S")])],
                         constraints=[])
    prob_s.capture_normalization(result.crit_values)
    Z, g, dZ, dg, _ = total_design_gradient(model, result, prob_s, design, 1.0)
    rng = np.random.default_rng(5)
    mag = np.abs(dZ)
    pick = rng.choice(np.nonzero(mag > 0.1 * mag.max())[0], size=4, replace=False)
    step = 1e-5
    for idx in pick:
        dv = DesignVector(values=design.values.copy(), lower=design.lower,
                          upper=design.upper, n_nodal=design.n_nodal)
        dv.values[idx] += step
        Sp = model.solve_steady(dv).crit_values["S"]
        dv.values[idx] -= 2 * step
        Sm = model.solve_steady(dv).crit_values["S"]
        fd = (Sp - Sm) / (2 * step) / abs(result.crit_values["S"])
        assert abs(fd - dZ[idx]) / max(abs(fd), abs(dZ[idx]), 1e-12) < 1e-4


def test_residual_phi_sparsity_audit(bend):
    # each column (perturbed node) touches only dofs of elements containing it
    model, problem, design, result = bend
    A = residual_phi_matrix(model, result, block="flow").tocsc()
    mesh = model.mesh
    cm = result.cm
    n = result.ctx.n
    cut_nodes = set()
    for e in np.nonzero(cm.classification == CUT)[0]:
        cut_nodes.update(mesh.elements[int(e)].tolist())
    for node in range(mesh.n_nodes):
        col = A[:, node]
        if node not in cut_nodes:
            assert col.nnz == 0
            continue
        if col.nnz == 0:
            continue
        allowed = set()
        for e in node_support(mesh, node):
            for p in cm.pieces.get(int(e), []):
                if p.dofs is not None:
                    allowed.update(p.dofs.tolist())
        for row in col.nonzero()[0]:
            assert (row % n) in allowed


def test_adjoint_is_exact_transpose_of_forward_linearization(bend):
    # the adjoint solve uses J^T of the same frozen-coefficient Jacobian
    from cutflow.flow import assemble_flow
    model, problem, design, result = bend
    ctx = result.ctx
    _, J = assemble_flow(ctx, model.physics.flow, result.flow_state,
                         coeff_state=result.flow_state, psibar=result.psibar_qp)
    adj = steady_adjoints(model, result, [{"ti": 1.0}])[0]
    dflow = result.crit_partials["ti"].d_flow
    resid = J.T @ adj.lam_flow + dflow
    assert np.linalg.norm(resid) / np.linalg.norm(dflow) < 1e-9


def test_species_only_criterion_drives_flow_adjoint_through_cross_term():
    # reverse block order: for a criterion on c alone, the flow adjoint RHS
    # is exactly the species cross-coupling applied to the species adjoint
    import scipy.sparse.linalg as spla
    from cutflow.flow import FlowParams, assemble_flow
    from cutflow.transport import TransportParams, species_flow_jacobian
    from cutflow.conditions import BoundaryRegion, wall_regions
    from cutflow.criteria import CriterionSpec
    from cutflow.grid import build_mesh
    from cutflow.cut import build_cut_model
    from cutflow.forms import build_context
    from cutflow.pipeline import ForwardModel, PhysicsConfig
    from cutflow.design import DesignVector, LevelSetMap, build_filter
    from cutflow.solve import SolveConfig
    from cutflow.transport import IndicatorParams

    mesh = build_mesh(((0, 0), (2, 1)), (16, 8))
    lsmap = LevelSetMap(mesh=mesh, filt=build_filter(mesh, 2.4 * mesh.h),
                        ports=[])
    regions = wall_regions(mesh, [
        BoundaryRegion(name="inlet", side="left", kind="velocity", span=(0, 1),
                       profile="parabola", amplitude=1.0, port=True,
                       species_value=1.0),
        BoundaryRegion(name="outlet", side="right", kind="traction", port=True),
    ])
    physics = PhysicsConfig(flow=FlowParams(rho=1.0, mu=0.5),
                            transport=TransportParams(diffusivity=0.05),
                            indicator=IndicatorParams())
    criteria = [CriterionSpec(name="K", kind="ks_target", surface="outlet",
                              beta_ks=50.0, c_ref=0.5)]
    model = ForwardModel(mesh, lsmap, regions, physics, criteria, SolveConfig())
    design = DesignVector(values=np.full(mesh.n_nodes, -0.02),
                          lower=np.full(mesh.n_nodes, -0.02),
                          upper=np.full(mesh.n_nodes, 0.02),
                          n_nodal=mesh.n_nodes)
    result = model.solve_steady(design)
    adj = steady_adjoints(model, result, [{"K": 1.0}])[0]
    assert np.linalg.norm(adj.lam_species) > 0
    # dF/du is identically zero for a species criterion: the flow adjoint
    # solves J_f^T lam_f = -C_cu^T lam_c exactly
    _, J_f = assemble_flow(result.ctx, physics.flow, result.flow_state,
                           coeff_state=result.flow_state,
                           psibar=result.psibar_qp)
    C = species_flow_jacobian(result.ctx, physics.transport,
                              result.species_state, result.flow_state)
    expect = spla.splu(J_f.T.tocsc()).solve(-(C.T @ adj.lam_species))
    np.testing.assert_allclose(adj.lam_flow, expect, atol=1e-12)


# --- transient adjoint (generic single-block sweep) ---------------------------

def test_transient_adjoint_heat_toy_matches_bruteforce():
    # 1D heat equation, BDF2 march, terminal quadratic cost; the adjoint
    # parameter gradient must match finite differences of the marched cost
    rng = np.random.default_rng(0)
    n = 12
    main = 2.0 * np.ones(n)
    K = sp.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1]).tocsc() * 9.0
    target = rng.normal(size=n)
    u0 = rng.normal(size=n)
    dt = 0.05
    n_steps = 8
    theta = 0.7  # source amplitude parameter
    source = rng.normal(size=n)

    def march(theta_val):
        states = [u0.copy()]
        for step in range(1, n_steps + 1):
            slot = bdf_slot(step, dt, states)
            A = slot.alpha * sp.eye(n) + K
            b = -(slot.hist) + theta_val * source
            states.append(np.asarray(spla.spsolve(A.tocsc(), b)))
        return states

    states = march(theta)
    cost = 0.5 * np.linalg.norm(states[-1] - target) ** 2

    def assemble_at(step, slot):
        A = (slot.alpha * sp.eye(n) + K).tocsc()
        lu = spla.splu(A.T.tocsc())
        return lu.solve

    def time_matrix_at(step, slot):
        return sp.eye(n).tocsc()

    def dz_du(step):
        if step == n_steps:
            return states[-1] - target
        return np.zeros(n)

    lams = adjoint_transient(assemble_at, time_matrix_at, states, dt, dz_du, n)
    # R^step = alpha u + hist + K u - theta * source: dR/dtheta = -source
    grad = sum(lams[s] @ (-source) for s in range(1, n_steps + 1))
    eps = 1e-6
    cp = 0.5 * np.linalg.norm(march(theta + eps)[-1] - target) ** 2
    cm_ = 0.5 * np.linalg.norm(march(theta - eps)[-1] - target) ** 2
    fd = (cp - cm_) / (2 * eps)
    assert abs(grad - fd) < 1e-9 * max(1.0, abs(fd))


def test_transient_adjoint_terminal_only_source():
    # with a terminal-only cost the final-step adjoint is the only nonzero
    # one when there is no cross-step coupling (single BE step history)
    n = 4
    K = sp.eye(n).tocsc()
    states = [np.zeros(n), np.ones(n)]
    dt = 1.0

    def assemble_at(step, slot):
        A = (slot.alpha * sp.eye(n) + K).tocsc()
        lu = spla.splu(A.T.tocsc())
        return lu.solve

    lams = adjoint_transient(assemble_at, lambda s, sl: sp.eye(n).tocsc(),
                             states, dt, lambda s: np.ones(n), n)
    assert np.linalg.norm(lams[1]) > 0


def test_transient_gradient_reduces_to_steady_for_huge_dt():
    from cutflow.sensitivities import transient_total_gradient
    from cutflow.solve import SolveConfig
    model, problem, design = bend_model(divisions=(12, 12))
    model.solve_config = SolveConfig(newton_tol=1e-12)
    res_s = model.solve_steady(design)
    problem.capture_normalization(res_s.crit_values)
    Zs, gs, dZs, dgs, _ = total_design_gradient(model, res_s, problem, design, 1.0)
    # transient run with an enormous step reaches the steady state immediately
    model.solve_config = SolveConfig(scheme="bdf2", dt=1e9, n_steps=3,
                                     newton_tol=1e-12)
    res_t = model.solve_transient(design)
    Zt, gt, dZt, dgt, _ = transient_total_gradient(model, res_t, problem,
                                                   design, 1.0)
    assert abs(Zt - Zs) / abs(Zs) < 1e-8
    denom = np.linalg.norm(dZs)
    assert np.linalg.norm(dZt - dZs) / denom < 1e-6
