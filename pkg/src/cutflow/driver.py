"""Batch run orchestration behind the command line interface.

Analysis runs solve one geometry and report criteria; optimization runs
drive the GCMMA loop with warm-started forward solves, adjoint gradients,
continuation on constraint tolerances, history CSV output and restartable
checkpoints. The gradient-check mode compares adjoint design derivatives
against global finite differences of the full pipeline; sweep mode reruns
an analysis over a list of parameter values.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from .design import DesignVector
from .errors import ConfigurationError, NonconvergenceError
from .gcmma import GCMMA
from .output import (HistoryWriter, ensure_dir, read_checkpoint, write_checkpoint,
                     write_vtk_fields)
from .pipeline import ForwardModel
from .sensitivities import total_design_gradient, transient_total_gradient


def build_model(cfg):
    mesh = cfg.build_mesh()
    regions = cfg.build_regions(mesh)
    lsmap = cfg.build_level_set_map(mesh)
    model = ForwardModel(mesh=mesh, lsmap=lsmap, regions=regions,
                         physics=cfg.build_physics(), criteria=cfg.criteria,
                         solve_config=cfg.solve)
    problem = cfg.build_problem()
    return model, problem


def transfer_flow_state(old_cm, new_cm, U_old):
    """Map a flow state between enrichment tables (warm starts)."""
    n_old, n_new = old_cm.n_dofs, new_cm.n_dofs
    U_new = np.zeros(3 * n_new)
    for (node, lvl), d_new in new_cm.dof_of.items():
        d_old = old_cm.dof_of.get((node, lvl))
        if d_old is None:
            d_old = old_cm.dof_of.get((node, 0))
        if d_old is None:
            continue
        for b in range(3):
            U_new[b * n_new + d_new] = U_old[b * n_old + d_old]
    return U_new


def run_analysis(cfg, outdir=None):
    """Solve the configured geometry once and report the criteria."""
    outdir = outdir or cfg.output.directory
    ensure_dir(outdir)
    model, problem = build_model(cfg)
    design = cfg.initial_design(model.mesh)
    if cfg.solve.scheme == "bdf2":
        result = model.solve_transient(design)
    else:
        result = model.solve_steady(design)
    write_vtk_fields(
        os.path.join(outdir, "fields_000000.vtk"), result.cm,
        flow_state=result.flow_state, species_state=result.species_state,
        psi=result.psi, indicator_params=model.physics.indicator,
    )
    names = [c.name for c in cfg.criteria]
    hist = HistoryWriter(os.path.join(outdir, "history.csv"), names, 0)
    hist.append(0, 0.0, [], result.crit_values, len(result.newton_trace), True)
    summary = {
        "criteria": dict(result.crit_values),
        "newton_iterations": len(result.newton_trace),
        "n_dofs": result.ctx.n * 3,
        "fluid_volume": result.cm.fluid_volume(),
        "surface_area": result.cm.surface_length(),
        "n_regions": result.cm.n_regions,
    }
    with open(os.path.join(outdir, "summary.txt"), "w") as f:
        for k, v in summary.items():
            f.write(f"{k} = {v!r}\n")
    return summary


def run_optimization(cfg, outdir=None, restart=None):
    """GCMMA optimization loop; returns a run summary dict."""
    outdir = outdir or cfg.output.directory
    ensure_dir(outdir)
    model, problem = build_model(cfg)
    design = cfg.initial_design(model.mesh)
    area = cfg.domain_area()
    transient = cfg.solve.scheme == "bdf2"

    optimizer = GCMMA(design.lower, design.upper, cfg.gcmma)
    state = optimizer.init_state(design.values)
    start_iter = 0
    warm = {"cm": None, "U": None}
    Z_prev = None
    first_feasible_Z = None
    if restart is not None:
        payload = read_checkpoint(restart)
        design.values = np.asarray(payload["design"], dtype=float)
        from .gcmma import GcmmaState
        if payload["optimizer"] is not None:
            state = GcmmaState.from_dict(payload["optimizer"])
        if payload["normalization"] is not None:
            problem.normalization = {int(k): v for k, v in
                                     payload["normalization"].items()}
        start_iter = payload["iteration"]
        extra = payload.get("extra") or {}
        if extra.get("warm_state") is not None and not transient:
            warm_dv = DesignVector(
                values=np.asarray(extra["warm_design"], dtype=float),
                lower=design.lower, upper=design.upper, n_nodal=design.n_nodal,
                port_layout=design.port_layout)
            _, warm_cm, _ = model.geometry(warm_dv)
            warm["cm"] = warm_cm
            warm["U"] = np.asarray(extra["warm_state"], dtype=float)
        if extra.get("Z_prev") is not None:
            Z_prev = float(extra["Z_prev"])
        if extra.get("first_feasible_Z") is not None:
            first_feasible_Z = float(extra["first_feasible_Z"])

    names = [c.name for c in cfg.criteria]
    hist = HistoryWriter(os.path.join(outdir, "history.csv"), names,
                         len(cfg.constraints))

    def forward(dv):
        if transient:
            return model.solve_transient(dv)
        if warm["cm"] is not None:
            phi, cm, ctx = model.geometry(dv)
            w = transfer_flow_state(warm["cm"], cm, warm["U"])
            return _steady_on_geometry(model, phi, cm, ctx, w)
        return model.solve_steady(dv)

    def evaluate_values(x):
        dv = DesignVector(values=np.array(x, dtype=float), lower=design.lower,
                          upper=design.upper, n_nodal=design.n_nodal,
                          port_layout=design.port_layout)
        res = forward(dv)
        vals = res.crit_values
        Z = problem.objective_value(vals)
        g = np.array([con.evaluate(vals, area, it)[0] for con in problem.constraints])
        return Z, g

    summary = {"iterations": 0, "converged": False, "feasible": False,
               "objective": None, "first_feasible_objective": None,
               "objective_history": [], "constraint_history": []}
    warm_design_values = design.values.copy()

    it = start_iter
    max_outer = cfg.gcmma.max_outer
    while it < max_outer:
        design.values = design.clipped(design.values)
        try:
            result = forward(design)
        except NonconvergenceError:
            if warm["cm"] is None:
                raise
            warm["cm"], warm["U"] = None, None  # cold retry once
            result = forward(design)
        warm_design_values = design.values.copy()
        if not transient:
            warm["cm"], warm["U"] = result.cm, result.flow_state

        values = result.crit_values
        if problem.normalization is None:
            problem.capture_normalization(values)

        if transient:
            Z, g, dZ, dg, report = transient_total_gradient(
                model, result, problem, design, area, iteration=it)
        else:
            Z, g, dZ, dg, report = total_design_gradient(
                model, result, problem, design, area, iteration=it)

        feasible = bool(np.all(g <= cfg.gcmma.tol_feasibility))
        if feasible and first_feasible_Z is None:
            first_feasible_Z = Z
        hist.append(it, Z, list(g), values, len(result.newton_trace), feasible)
        summary["objective_history"].append(Z)
        summary["constraint_history"].append(list(map(float, g)))

        if cfg.output.field_every and it % cfg.output.field_every == 0:
            write_vtk_fields(
                os.path.join(outdir, f"fields_{it:06d}.vtk"), result.cm,
                flow_state=result.flow_state, species_state=result.species_state,
                psi=result.psi, indicator_params=model.physics.indicator)

        if (Z_prev is not None and feasible
                and abs(Z - Z_prev) <= cfg.gcmma.tol_objective * abs(Z_prev)):
            summary["converged"] = True
            it += 1
            break
        Z_prev = Z

        dg_mat = dg.reshape(len(problem.constraints), -1) if len(
            problem.constraints) else np.zeros((0, design.n))
        state, diag = optimizer.step(state, Z, dZ, np.asarray(g), dg_mat,
                                     evaluate=evaluate_values)
        design.values = state.x.copy()
        it += 1
        # checkpoint after the step: a restart resumes with the identical
        # warm state, so the continuation is reproducible
        if cfg.output.checkpoint_every and it % cfg.output.checkpoint_every == 0:
            write_checkpoint(
                os.path.join(outdir, "checkpoint.json"), design, state,
                problem.normalization, it,
                extra={
                    "warm_state": None if warm["U"] is None else warm["U"].tolist(),
                    "warm_design": warm_design_values.tolist(),
                    "Z_prev": Z_prev,
                    "first_feasible_Z": first_feasible_Z,
                })

    summary["iterations"] = it - start_iter
    summary["objective"] = Z
    summary["feasible"] = feasible
    summary["first_feasible_objective"] = first_feasible_Z
    write_checkpoint(
        os.path.join(outdir, "checkpoint.json"), design, state,
        problem.normalization, it,
        extra={
            "warm_state": None if warm["U"] is None else warm["U"].tolist(),
            "warm_design": warm_design_values.tolist(),
            "Z_prev": Z_prev,
            "first_feasible_Z": first_feasible_Z,
        })
    return summary


def _steady_on_geometry(model, phi, cm, ctx, warm_state):
    """model.solve_steady but reusing an already-built geometry."""
    from .pipeline import ForwardResult
    from .solve import steady_solve

    psi, psibar = model._indicator(ctx)
    n = ctx.n
    if warm_state is None or warm_state.shape[0] != 3 * n:
        warm_state = np.zeros(3 * n)
    make = model._flow_assemble_factory(ctx, psibar)
    U, trace = steady_solve(make, warm_state, model.solve_config)
    result = ForwardResult(phi=phi, cm=cm, ctx=ctx, psi=psi, psibar_qp=psibar,
                           flow_state=U, newton_trace=trace)
    if model._needs_species():
        result.species_state = model._solve_species(ctx, U)
    model._evaluate_criteria(result)
    return result


def run_gradcheck(cfg, outdir=None, n_vars=5, step=1e-5, seed=7):
    """Adjoint gradients vs global central FD on random design variables."""
    outdir = outdir or cfg.output.directory
    ensure_dir(outdir)
    model, problem = build_model(cfg)
    design = cfg.initial_design(model.mesh)
    area = cfg.domain_area()
    result = model.solve_steady(design)
    if problem.normalization is None:
        problem.capture_normalization(result.crit_values)
    Z, g, dZ, dg, report = total_design_gradient(model, result, problem, design, area)

    rng = np.random.default_rng(seed)
    # prefer variables whose gradient is significant (near cut elements)
    mag = np.abs(dZ)
    candidates = np.nonzero(mag > 0.01 * mag.max())[0]
    if candidates.shape[0] == 0:
        candidates = np.arange(design.n)
    pick = rng.choice(candidates, size=min(n_vars, candidates.shape[0]),
                      replace=False)

    rows = []
    for idx in pick:
        dv = DesignVector(values=design.values.copy(), lower=design.lower,
                          upper=design.upper, n_nodal=design.n_nodal,
                          port_layout=design.port_layout)
        dv.values[idx] += step
        Zp = problem.objective_value(model.solve_steady(dv).crit_values)
        dv.values[idx] -= 2 * step
        Zm = problem.objective_value(model.solve_steady(dv).crit_values)
        fd = (Zp - Zm) / (2 * step)
        an = dZ[idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-30)
        rows.append((int(idx), an, fd, rel))

    path = os.path.join(outdir, "gradcheck.csv")
    with open(path, "w") as f:
        f.write("variable,adjoint,fd,rel_error\n")
        for idx, an, fd, rel in rows:
            f.write(f"{idx},{an!r},{fd!r},{rel!r}\n")
    return rows


def run_sweep(cfg, parameter, values, outdir=None):
    """Re-run the analysis for each value of a named flow parameter."""
    outdir = outdir or cfg.output.directory
    ensure_dir(outdir)
    results = []
    for v in values:
        if parameter == "k_pressure":
            flow = replace(cfg.flow, k_pressure=float(v))
        elif parameter == "alpha_nitsche":
            flow = replace(cfg.flow, alpha_nitsche=float(v))
        else:
            raise ConfigurationError(f"sweep parameter {parameter!r} not supported")
        sub = replace(cfg, flow=flow)
        summary = run_analysis(sub, outdir=os.path.join(outdir, f"{parameter}_{v:g}"))
        summary["parameter"] = float(v)
        results.append(summary)
    path = os.path.join(outdir, "sweep.csv")
    with open(path, "w") as f:
        names = sorted(results[0]["criteria"]) if results else []
        f.write("value," + ",".join(names) + "\n")
        for r in results:
            f.write(",".join([repr(r["parameter"])]
                             + [repr(r["criteria"][k]) for k in names]) + "\n")
    return results
