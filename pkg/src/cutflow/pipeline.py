"""Forward analysis pipeline.

One geometry evaluation runs: design vector -> nodal level set -> cut
model -> integration context -> indicator solve (when the pressure
penalty is indicator-gated) -> flow solve (steady or BDF2 transient) ->
species solve (when any criterion needs it) -> criteria. The result
bundle carries everything the adjoint needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flow as flow_mod
from . import transport as transport_mod
from .criteria import evaluate_criterion
from .cut import build_cut_model
from .errors import ConfigurationError
from .forms import build_context
from .solve import SolveConfig, linear_solve, march, newton_solve, steady_solve


@dataclass
class PhysicsConfig:
    flow: flow_mod.FlowParams
    transport: transport_mod.TransportParams = None
    indicator: transport_mod.IndicatorParams = field(
        default_factory=transport_mod.IndicatorParams
    )
    pressure_penalty_scope: str = "indicator"  # 'indicator' | 'whole' | 'off'

    def __post_init__(self):
        if self.pressure_penalty_scope not in ("indicator", "whole", "off"):
            raise ConfigurationError(
                f"unknown pressure penalty scope {self.pressure_penalty_scope!r}"
            )


@dataclass
class ForwardResult:
    phi: object
    cm: object
    ctx: object
    psi: np.ndarray = None
    psibar_qp: np.ndarray = None
    flow_state: np.ndarray = None
    species_state: np.ndarray = None
    flow_history: list = None  # transient runs
    crit_values: dict = None
    crit_partials: dict = None  # name -> CriterionValue (with partials)
    newton_trace: list = None
    step_crit_values: dict = None  # transient: name -> per-step values


class ForwardModel:
    """Binds mesh, design map, boundary regions, physics and criteria."""

    def __init__(self, mesh, lsmap, regions, physics, criteria, solve_config=None):
        self.mesh = mesh
        self.lsmap = lsmap
        self.regions = list(regions)
        self.physics = physics
        self.criteria = list(criteria)
        self.solve_config = solve_config or SolveConfig()

    # -- geometry -----------------------------------------------------------
    def geometry(self, design):
        phi = self.lsmap.build(design)
        cm = build_cut_model(self.mesh, phi.phi)
        if cm.n_dofs == 0:
            raise ConfigurationError("design produced an empty fluid domain")
        ctx = build_context(cm, self.regions)
        return phi, cm, ctx

    # -- indicator ----------------------------------------------------------
    def _indicator(self, ctx):
        scope = self.physics.pressure_penalty_scope
        nq = ctx.vol_w.shape[0] if ctx.vol_w is not None else 0
        if scope == "off" or self.physics.flow.k_pressure == 0.0:
            return None, None
        if scope == "whole":
            return None, np.ones(nq)
        psi = transport_mod.solve_indicator(
            ctx, self.physics.indicator,
            lambda A, b: linear_solve(A, b, self.solve_config.linear_method,
                                      self.solve_config.linear_tol),
        )
        psibar = transport_mod.indicator_at_volume_qp(ctx, psi, self.physics.indicator)
        return psi, psibar

    def _needs_species(self):
        return any(c.kind == "ks_target" for c in self.criteria)

    # -- flow ---------------------------------------------------------------
    def _flow_assemble_factory(self, ctx, psibar):
        params = self.physics.flow

        def make(slot):
            def assemble(x):
                return flow_mod.assemble_flow(
                    ctx, params, x, coeff_state=x, slot=slot, psibar=psibar
                )
            return assemble

        return make

    def solve_steady(self, design, warm=None):
        phi, cm, ctx = self.geometry(design)
        psi, psibar = self._indicator(ctx)
        n = ctx.n
        if warm is None or warm.shape[0] != 3 * n:
            warm = np.zeros(3 * n)
        make = self._flow_assemble_factory(ctx, psibar)
        U, trace = steady_solve(make, warm, self.solve_config)
        result = ForwardResult(
            phi=phi, cm=cm, ctx=ctx, psi=psi, psibar_qp=psibar,
            flow_state=U, newton_trace=trace,
        )
        if self._needs_species():
            result.species_state = self._solve_species(ctx, U)
        self._evaluate_criteria(result)
        return result

    def _solve_species(self, ctx, U):
        tparams = self.physics.transport
        if tparams is None:
            raise ConfigurationError("species criterion present but transport disabled")

        def assemble(c):
            return transport_mod.assemble_species(ctx, tparams, c, U)

        c, _ = newton_solve(
            assemble, np.zeros(ctx.n),
            tol=self.solve_config.newton_tol,
            max_iter=self.solve_config.max_newton,
            linear_method=self.solve_config.linear_method,
            linear_tol=self.solve_config.linear_tol,
        )
        return c

    def solve_transient(self, design):
        cfg = self.solve_config
        if cfg.scheme != "bdf2":
            raise ConfigurationError("transient solve requires scheme='bdf2'")
        if self._needs_species():
            raise ConfigurationError(
                "species transport is steady-only; transient runs cannot "
                "evaluate ks_target criteria")
        phi, cm, ctx = self.geometry(design)
        psi, psibar = self._indicator(ctx)
        n = ctx.n
        make = self._flow_assemble_factory(ctx, psibar)
        history, traces = march(make, np.zeros(3 * n), cfg)
        result = ForwardResult(
            phi=phi, cm=cm, ctx=ctx, psi=psi, psibar_qp=psibar,
            flow_state=history[-1], flow_history=history,
            newton_trace=[t for tr in traces for t in tr],
        )
        self._evaluate_criteria(result)
        return result

    # -- criteria -----------------------------------------------------------
    def _evaluate_criteria(self, result):
        params = self.physics.flow
        values, partials = {}, {}
        if result.flow_history is not None:
            step_values = {}
            for spec in self.criteria:
                sampling = getattr(spec, "time_sampling", "final")
                if spec.kind in ("volume_fluid", "surface_area"):
                    cv = evaluate_criterion(spec, result.ctx, params)
                    values[spec.name] = cv.value
                    partials[spec.name] = cv
                    continue
                per_step = [
                    evaluate_criterion(spec, result.ctx, params,
                                       flow_state=u,
                                       species_state=result.species_state).value
                    for u in result.flow_history[1:]
                ]
                step_values[spec.name] = per_step
                if sampling == "average":
                    values[spec.name] = float(np.mean(per_step))
                else:
                    values[spec.name] = per_step[-1]
                partials[spec.name] = evaluate_criterion(
                    spec, result.ctx, params, flow_state=result.flow_history[-1],
                    species_state=result.species_state, want_partials=True,
                )
            result.step_crit_values = step_values
        else:
            for spec in self.criteria:
                cv = evaluate_criterion(
                    spec, result.ctx, params,
                    flow_state=result.flow_state,
                    species_state=result.species_state,
                    want_partials=True,
                )
                values[spec.name] = cv.value
                partials[spec.name] = cv
        result.crit_values = values
        result.crit_partials = partials
