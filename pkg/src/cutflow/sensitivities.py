"""Discrete adjoints and total design derivatives.

The forward pipeline is level set -> cut geometry -> indicator -> flow ->
species -> criteria. Adjoints are solved in reverse block order (species,
flow, indicator), each block reusing one transposed factorization for all
functionals. Geometric partials of residuals and criteria are computed
semi-analytically: per intersected element, central finite differences
w.r.t. each corner level set value re-cut that element locally with the
enrichment frozen and re-evaluate the same integrand kernels the global
assembly uses. Ghost-penalty terms integrate over full facets and carry
no geometric dependence, so they drop out of the partials.

The velocity-dependent penalty factors are frozen identically in the
forward linearization and here, so each adjoint operator is the exact
transpose of the forward one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import flow as flow_mod
from . import transport as transport_mod
from .criteria import evaluate_criterion, ks_local_sum
from .forms import element_boundary_edges, element_context
from .cut import CUT
from .solve import bdf_slot

FD_STEP_FRACTION = 1e-4  # geometric FD step, as a fraction of h
MAX_STEP_HALVINGS = 4


@dataclass
class FunctionalAdjoint:
    """Adjoint vectors of one functional (objective or constraint)."""

    dcrit: dict  # d(functional)/d(criterion value)
    lam_flow: np.ndarray = None
    lam_species: np.ndarray = None
    lam_psi: np.ndarray = None


@dataclass
class GradientReport:
    flagged_nodes: list = field(default_factory=list)


def _functional_state_partials(functional_dcrit, crit_partials, n):
    """Assemble dF/du and dF/dc from criterion chain weights."""
    dflow = np.zeros(3 * n)
    dspecies = np.zeros(n)
    for name, w in functional_dcrit.items():
        cv = crit_partials[name]
        if cv.d_flow is not None:
            dflow += w * cv.d_flow
        if cv.d_species is not None:
            dspecies += w * cv.d_species
    return dflow, dspecies


def steady_adjoints(model, result, functionals):
    """Solve the adjoint cascade for a list of functionals.

    functionals: list of dicts mapping criterion name -> dF/d(criterion).
    Returns a list of FunctionalAdjoint in the same order.
    """
    ctx = result.ctx
    n = ctx.n
    params = model.physics.flow
    _, J_f = flow_mod.assemble_flow(
        ctx, params, result.flow_state, coeff_state=result.flow_state,
        psibar=result.psibar_qp,
    )
    lu_f = spla.splu(J_f.T.tocsc())

    has_species = result.species_state is not None
    if has_species:
        tparams = model.physics.transport
        _, J_c = transport_mod.assemble_species(
            ctx, tparams, result.species_state, result.flow_state
        )
        lu_c = spla.splu(J_c.T.tocsc())
        C_cu = transport_mod.species_flow_jacobian(
            ctx, tparams, result.species_state, result.flow_state
        )

    has_psi = result.psi is not None
    if has_psi:
        _, J_psi = transport_mod.assemble_indicator(ctx, model.physics.indicator,
                                                    result.psi)
        lu_psi = spla.splu(J_psi.T.tocsc())
        C_fpsi = flow_mod.flow_indicator_jacobian(
            ctx, params, result.flow_state, result.psi, model.physics.indicator
        )

    out = []
    for dcrit in functionals:
        adj = FunctionalAdjoint(dcrit=dict(dcrit))
        dflow, dspecies = _functional_state_partials(dcrit, result.crit_partials, n)
        if has_species:
            adj.lam_species = lu_c.solve(-dspecies)
            rhs_flow = -dflow - C_cu.T @ adj.lam_species
        else:
            adj.lam_species = None
            rhs_flow = -dflow
        adj.lam_flow = lu_f.solve(rhs_flow)
        if has_psi:
            adj.lam_psi = lu_psi.solve(-(C_fpsi.T @ adj.lam_flow))
        out.append(adj)
    return out


def _restrict(vec, ids, blocks, n):
    """Restrict a block vector (blocks * n) to local scalar ids."""
    return np.concatenate([vec[b * n + ids] for b in range(blocks)])


def _local_region_entries(model, e):
    """Boundary edges of element e grouped per region name."""
    edges = element_boundary_edges(model.mesh, e)
    if not edges:
        return {}
    out = {}
    for region in model.regions:
        entries = [ent for ent in edges if ent[0] == region.side]
        if entries:
            out[region.name] = entries
    return out


class _LocalEvaluator:
    """Evaluates sum_k(lambda_k . R_local + dF_k/dcrit . crit_local)(phi4)."""

    def __init__(self, model, result, adjoints, criteria_chains):
        self.model = model
        self.result = result
        self.adjoints = adjoints
        self.chains = criteria_chains  # list per functional: {crit name: weight}
        self.n = result.ctx.n
        self.params = model.physics.flow
        self.has_species = result.species_state is not None
        self.has_psi = result.psi is not None
        self.scope = model.physics.pressure_penalty_scope
        # frozen shift for KS criteria (not element-separable)
        self.ks_aux = {
            spec.name: (spec, result.crit_partials[spec.name].aux)
            for spec in model.criteria if spec.kind == "ks_target"
        }

    def __call__(self, e, phi4, side_entries):
        cm = self.result.cm
        ctx = element_context(cm, e, phi4, regions=self.model.regions,
                              side_of_elem=side_entries)
        vals = np.zeros(len(self.adjoints))
        if ctx is None:
            return vals
        ids = ctx.scalar_ids
        n = self.n
        U_loc = _restrict(self.result.flow_state, ids, 3, n)
        if self.scope == "whole":
            psibar = np.ones(ctx.vol_w.shape[0])
        elif self.scope == "indicator" and self.has_psi:
            psibar = transport_mod.indicator_at_volume_qp(
                ctx, self.result.psi[ids], self.model.physics.indicator
            )
        else:
            psibar = None
        r_f, _ = flow_mod.assemble_flow(
            ctx, self.params, U_loc, coeff_state=U_loc, psibar=psibar,
            want_matrix=False,
        )
        r_c = None
        if self.has_species:
            c_loc = self.result.species_state[ids]
            r_c, _ = transport_mod.assemble_species(
                ctx, self.model.physics.transport, c_loc, U_loc, want_matrix=False
            )
        r_psi = None
        if self.has_psi:
            r_psi, _ = transport_mod.assemble_indicator(
                ctx, self.model.physics.indicator, self.result.psi[ids],
                want_matrix=False,
            )

        crit_local = {}
        for spec in self.model.criteria:
            if spec.kind == "ks_target":
                _, aux = self.ks_aux[spec.name]
                shift, total = aux
                contrib = ks_local_sum(spec, ctx, self.params,
                                       self.result.species_state[ids], shift)
                # chain d(criterion)/d(local sum) = 1 / (beta * total)
                crit_local[spec.name] = contrib / (spec.beta_ks * total)
            else:
                crit_local[spec.name] = evaluate_criterion(
                    spec, ctx, self.params,
                    flow_state=U_loc,
                    species_state=(self.result.species_state[ids]
                                   if self.has_species else None),
                    allow_empty=True,
                ).value

        for k, adj in enumerate(self.adjoints):
            total = float(adj.lam_flow[np.concatenate([ids, ids + n, ids + 2 * n])]
                          @ r_f) if adj.lam_flow is not None else 0.0
            if r_c is not None and adj.lam_species is not None:
                total += float(adj.lam_species[ids] @ r_c)
            if r_psi is not None and adj.lam_psi is not None:
                total += float(adj.lam_psi[ids] @ r_psi)
            for name, w in self.chains[k].items():
                total += w * crit_local.get(name, 0.0)
            vals[k] = total
        return vals


def geometry_gradient(model, result, adjoints, report=None):
    """d(functionals)/d(nodal phi) via local recut finite differences.

    Returns an array (n_functionals, n_mesh_nodes).
    """
    cm = result.cm
    mesh = model.mesh
    h = mesh.h
    chains = [adj.dcrit for adj in adjoints]
    evaluator = _LocalEvaluator(model, result, adjoints, chains)
    grad = np.zeros((len(adjoints), mesh.n_nodes))
    cut_elems = np.nonzero(cm.classification == CUT)[0]
    for e in cut_elems:
        e = int(e)
        side_entries = _local_region_entries(model, e)
        nodes = mesh.elements[e]
        base = cm.phi[nodes].astype(float)
        for c in range(4):
            delta = FD_STEP_FRACTION * h
            done = False
            for _ in range(MAX_STEP_HALVINGS + 1):
                try:
                    pp = base.copy()
                    pp[c] += delta
                    vp = evaluator(e, pp, side_entries)
                    pm = base.copy()
                    pm[c] -= delta
                    vm = evaluator(e, pm, side_entries)
                    grad[:, nodes[c]] += (vp - vm) / (2 * delta)
                    done = True
                    break
                except ValueError:
                    delta *= 0.5
            if not done:
                # one-sided step away from the sign change
                delta = FD_STEP_FRACTION * h
                sgn = 1.0 if base[c] > 0 else -1.0
                try:
                    pp = base.copy()
                    pp[c] += sgn * delta
                    vp = evaluator(e, pp, side_entries)
                    v0 = evaluator(e, base, side_entries)
                    grad[:, nodes[c]] += sgn * (vp - v0) / delta
                    if report is not None:
                        report.flagged_nodes.append(int(nodes[c]))
                except ValueError:
                    if report is not None:
                        report.flagged_nodes.append(int(nodes[c]))
    return grad


def total_design_gradient(model, result, problem, design, domain_area, iteration=0):
    """Objective/constraint values and their total design derivatives.

    Returns (Z, g_values, dZ_ds, dg_ds, report).
    """
    values = result.crit_values
    report = GradientReport()

    chains = [problem.objective_dcrit(values)]
    g_values = []
    for con in problem.constraints:
        g, dg = con.evaluate(values, domain_area, iteration)
        g_values.append(g)
        chains.append(dg)

    adjoints = steady_adjoints(model, result, chains)
    dphi = geometry_gradient(model, result, adjoints, report)
    J_s = model.lsmap.jacobian(design)  # (n_nodes, n_design)
    dZ_ds = J_s.T @ dphi[0]
    dg_ds = np.array([J_s.T @ dphi[1 + i] for i in range(len(problem.constraints))])
    Z = problem.objective_value(values)
    return Z, np.asarray(g_values), dZ_ds, dg_ds, report


def residual_phi_matrix(model, result, block="flow"):
    """Materialized sparse d(residual)/d(nodal phi) for audits and tests."""
    cm = result.cm
    mesh = model.mesh
    h = mesh.h
    n = result.ctx.n
    blocks = {"flow": 3, "species": 1, "indicator": 1}[block]
    rows, cols, vals = [], [], []
    cut_elems = np.nonzero(cm.classification == CUT)[0]
    for e in cut_elems:
        e = int(e)
        side_entries = _local_region_entries(model, e)
        nodes = mesh.elements[e]
        base = cm.phi[nodes].astype(float)

        def local_residual(phi4):
            ctx = element_context(cm, e, phi4, regions=model.regions,
                                  side_of_elem=side_entries)
            if ctx is None:
                return None, None
            ids = ctx.scalar_ids
            U_loc = _restrict(result.flow_state, ids, 3, n)
            if block == "flow":
                scope = model.physics.pressure_penalty_scope
                if scope == "whole":
                    psibar = np.ones(ctx.vol_w.shape[0])
                elif scope == "indicator" and result.psi is not None:
                    psibar = transport_mod.indicator_at_volume_qp(
                        ctx, result.psi[ids], model.physics.indicator)
                else:
                    psibar = None
                r, _ = flow_mod.assemble_flow(
                    ctx, model.physics.flow, U_loc, coeff_state=U_loc,
                    psibar=psibar, want_matrix=False)
            elif block == "species":
                r, _ = transport_mod.assemble_species(
                    ctx, model.physics.transport, result.species_state[ids],
                    U_loc, want_matrix=False)
            else:
                r, _ = transport_mod.assemble_indicator(
                    ctx, model.physics.indicator, result.psi[ids],
                    want_matrix=False)
            gids = np.concatenate([ids + b * n for b in range(blocks)])
            return r, gids

        for c in range(4):
            delta = FD_STEP_FRACTION * h
            try:
                pp = base.copy()
                pp[c] += delta
                rp, gids = local_residual(pp)
                pm = base.copy()
                pm[c] -= delta
                rm, _ = local_residual(pm)
            except ValueError:
                continue
            if rp is None:
                continue
            dr = (rp - rm) / (2 * delta)
            rows.append(gids)
            cols.append(np.full(gids.shape[0], nodes[c], dtype=np.int64))
            vals.append(dr)
    if not rows:
        return sp.csr_matrix((blocks * n, mesh.n_nodes))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(blocks * n, mesh.n_nodes),
    )


def transient_total_gradient(model, result, problem, design, domain_area,
                             iteration=0):
    """Total design derivatives for a BDF2-marched flow problem.

    Criteria sampled per their time_sampling ('final' or 'average' over
    steps 1..N, the initial condition excluded); constraints always use
    final-step values. Species transport is steady-only and not supported
    on the transient path.
    """
    cfg = model.solve_config
    dt = cfg.dt
    history = result.flow_history
    n_steps = len(history) - 1
    ctx = result.ctx
    n = ctx.n
    params = model.physics.flow
    values = result.crit_values
    report = GradientReport()

    chains = [problem.objective_dcrit(values)]
    g_values = []
    for con in problem.constraints:
        g, dg = con.evaluate(values, domain_area, iteration)
        g_values.append(g)
        chains.append(dg)
    n_func = len(chains)

    static_kinds = ("volume_fluid", "surface_area")
    spec_of = {spec.name: spec for spec in model.criteria}

    def step_weight(spec, step):
        if spec.kind in static_kinds:
            return 0.0  # handled as a static (geometry-only) contribution
        if spec.time_sampling == "average":
            return 1.0 / n_steps
        return 1.0 if step == n_steps else 0.0

    # per-step criterion partials, combined into per-functional dF/du^n
    lams = [[None] * (n_steps + 1) for _ in range(n_func)]
    mats_M = {}

    def M(step):
        if step not in mats_M:
            slot = bdf_slot(step, dt, history[:step])
            mats_M[step] = flow_mod.flow_time_matrix(ctx, params, history[step], slot)
        return mats_M[step]

    C_fpsi_acc = [np.zeros(n) for _ in range(n_func)] if result.psi is not None else None

    for step in range(n_steps, 0, -1):
        slot = bdf_slot(step, dt, history[:step])
        _, J = flow_mod.assemble_flow(
            ctx, params, history[step], coeff_state=history[step], slot=slot,
            psibar=result.psibar_qp,
        )
        lu = spla.splu(J.T.tocsc())
        part = {}
        for name, spec in spec_of.items():
            if spec.kind in static_kinds:
                continue
            part[name] = evaluate_criterion(
                spec, ctx, params, flow_state=history[step], want_partials=True
            )
        C = None
        if C_fpsi_acc is not None:
            C = flow_mod.flow_indicator_jacobian(
                ctx, params, history[step], result.psi, model.physics.indicator)
        for k, chain in enumerate(chains):
            rhs = np.zeros(3 * n)
            for name, w in chain.items():
                spec = spec_of[name]
                sw = step_weight(spec, step)
                if sw and part[name].d_flow is not None:
                    rhs -= w * sw * part[name].d_flow
            if step + 1 <= n_steps:
                rhs -= (-2.0 / dt) * (M(step + 1).T @ lams[k][step + 1])
            if step + 2 <= n_steps:
                rhs -= (0.5 / dt) * (M(step + 2).T @ lams[k][step + 2])
            lams[k][step] = lu.solve(rhs)
            if C is not None:
                C_fpsi_acc[k] += C.T @ lams[k][step]
        mats_M.pop(step + 2, None)  # only two history levels needed

    adjoints = []
    if result.psi is not None:
        _, J_psi = transport_mod.assemble_indicator(
            ctx, model.physics.indicator, result.psi)
        lu_psi = spla.splu(J_psi.T.tocsc())
    for k, chain in enumerate(chains):
        adj = FunctionalAdjoint(dcrit=dict(chain))
        adj.lam_psi = lu_psi.solve(-C_fpsi_acc[k]) if result.psi is not None else None
        adjoints.append(adj)

    dphi = _transient_geometry_gradient(model, result, chains, lams, adjoints,
                                        spec_of, step_weight, report)
    J_s = model.lsmap.jacobian(design)
    dZ_ds = J_s.T @ dphi[0]
    dg_ds = np.array([J_s.T @ dphi[1 + i] for i in range(len(problem.constraints))])
    Z = problem.objective_value(values)
    return Z, np.asarray(g_values), dZ_ds, dg_ds, report


def _transient_geometry_gradient(model, result, chains, lams, adjoints, spec_of,
                                 step_weight, report):
    """Per-node level set partials accumulated over all time steps."""
    cm = result.cm
    mesh = model.mesh
    h = mesh.h
    cfg = model.solve_config
    dt = cfg.dt
    history = result.flow_history
    n_steps = len(history) - 1
    n = result.ctx.n
    n_func = len(chains)
    params = model.physics.flow
    grad = np.zeros((n_func, mesh.n_nodes))
    static_kinds = ("volume_fluid", "surface_area")

    def payload(e, phi4, side_entries):
        ctx = element_context(cm, e, phi4, regions=model.regions,
                              side_of_elem=side_entries)
        vals = np.zeros(n_func)
        if ctx is None:
            return vals
        ids = ctx.scalar_ids
        gids = np.concatenate([ids, ids + n, ids + 2 * n])
        if model.physics.pressure_penalty_scope == "whole":
            psibar = np.ones(ctx.vol_w.shape[0])
        elif result.psi is not None:
            psibar = transport_mod.indicator_at_volume_qp(
                ctx, result.psi[ids], model.physics.indicator)
        else:
            psibar = None
        for step in range(1, n_steps + 1):
            slot = bdf_slot(step, dt, history[:step])
            slot_loc = type(slot)(alpha=slot.alpha, hist=slot.hist[gids],
                                  dt=slot.dt, t=slot.t)
            U_loc = history[step][gids]
            r_f, _ = flow_mod.assemble_flow(
                ctx, params, U_loc, coeff_state=U_loc, slot=slot_loc,
                psibar=psibar, want_matrix=False)
            crit_loc = {}
            for name, spec in spec_of.items():
                if spec.kind in static_kinds:
                    continue
                crit_loc[name] = evaluate_criterion(
                    spec, ctx, params, flow_state=U_loc, allow_empty=True).value
            for k in range(n_func):
                vals[k] += float(lams[k][step][gids] @ r_f)
                for name, w in chains[k].items():
                    sw = step_weight(spec_of[name], step)
                    if sw:
                        vals[k] += w * sw * crit_loc.get(name, 0.0)
        # static geometry criteria and the indicator residual
        for name, spec in spec_of.items():
            if spec.kind not in static_kinds:
                continue
            v = evaluate_criterion(spec, ctx, params, allow_empty=True).value
            for k in range(n_func):
                w = chains[k].get(name, 0.0)
                if w:
                    vals[k] += w * v
        if result.psi is not None:
            r_psi, _ = transport_mod.assemble_indicator(
                ctx, model.physics.indicator, result.psi[ids], want_matrix=False)
            for k, adj in enumerate(adjoints):
                if adj.lam_psi is not None:
                    vals[k] += float(adj.lam_psi[ids] @ r_psi)
        return vals

    cut_elems = np.nonzero(cm.classification == CUT)[0]
    for e in cut_elems:
        e = int(e)
        side_entries = _local_region_entries(model, e)
        nodes = mesh.elements[e]
        base = cm.phi[nodes].astype(float)
        for c in range(4):
            delta = FD_STEP_FRACTION * h
            done = False
            for _ in range(MAX_STEP_HALVINGS + 1):
                try:
                    pp = base.copy()
                    pp[c] += delta
                    vp = payload(e, pp, side_entries)
                    pm = base.copy()
                    pm[c] -= delta
                    vm = payload(e, pm, side_entries)
                    grad[:, nodes[c]] += (vp - vm) / (2 * delta)
                    done = True
                    break
                except ValueError:
                    delta *= 0.5
            if not done:
                report.flagged_nodes.append(int(nodes[c]))
    return grad


# ---------------------------------------------------------------------------
# transient adjoint (generic single-block system, used for the flow march)
# ---------------------------------------------------------------------------

def adjoint_transient(assemble_at, time_matrix_at, history, dt, dz_du, n_dofs):
    """Backward BDF2 adjoint sweep for one time-marched system.

    assemble_at(step, slot) -> transposed-solve factorization of dR^step/du.
    time_matrix_at(step, slot) -> dR^step/d(du/dt slot) sparse matrix.
    history: states [u0 .. uN]; dz_du(step) -> partial of the objective
    w.r.t. the state at that step (zero array when absent).
    Returns the list of adjoint vectors [lam_1 .. lam_N] (index 0 unused).
    """
    n_steps = len(history) - 1
    lams = [None] * (n_steps + 1)
    mats = {}

    def M(step):
        if step not in mats:
            slot = bdf_slot(step, dt, history[:step])
            mats[step] = time_matrix_at(step, slot)
        return mats[step]

    for step in range(n_steps, 0, -1):
        rhs = -np.asarray(dz_du(step), dtype=float)
        if step + 1 <= n_steps:
            coef = -1.0 / dt if step + 1 == 1 else -2.0 / dt
            rhs -= coef * (M(step + 1).T @ lams[step + 1])
        if step + 2 <= n_steps and step + 2 >= 2:
            rhs -= (0.5 / dt) * (M(step + 2).T @ lams[step + 2])
        slot = bdf_slot(step, dt, history[:step])
        lams[step] = assemble_at(step, slot)(rhs)
    return lams
