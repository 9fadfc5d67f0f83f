"""Species advection-diffusion and the puddle-indicator diffusion problem.

Both fields live in the same enriched scalar space as each pressure /
velocity component. Species transport is one-way coupled to the flow
(velocity enters as data); the indicator field depends only on geometry:
a linear diffusion-reaction solve whose solution relaxes to psi_ref in
fluid regions with no path to a port and is pinned to zero at inlets and
outlets, then projected by a sharp tanh into a binary switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .flow import _Coo, _gather, _scatter_block

GALERKIN = "galerkin"
STABILIZATION = "stabilization"
NITSCHE = "nitsche"
NEUMANN = "neumann"
GHOST = "ghost"
ALL_TERMS = frozenset((GALERKIN, STABILIZATION, NITSCHE, NEUMANN, GHOST))


@dataclass
class TransportParams:
    diffusivity: float = 1.0
    alpha_nitsche: float = 1.0
    alpha_gp: float = 0.05
    source: float = 0.0  # volumetric species source
    tau_time_term: bool = True  # include (2/dt)^2 in the SUPG time scale

    def __post_init__(self):
        if self.diffusivity <= 0:
            raise ValueError("diffusivity must be positive")


@dataclass
class IndicatorParams:
    reaction: float = 0.01  # relaxation rate toward psi_ref
    psi_ref: float = 1.0
    alpha_nitsche: float = 1.0
    alpha_gp: float = 0.05
    k_sharpness: float = 1000.0
    k_threshold: float = 0.99

    def __post_init__(self):
        if self.reaction <= 0 or self.k_sharpness <= 0:
            raise ValueError("reaction and sharpness must be positive")
        if not 0.0 < self.k_threshold < 1.0:
            raise ValueError("projection threshold factor must be in (0, 1)")


def _tau_species(params, slot, speed2, h):
    k = params.diffusivity
    a = (4.0 * k / (h * h)) ** 2
    if slot is not None and slot.dt is not None and params.tau_time_term:
        a = a + (2.0 / slot.dt) ** 2
    tau = 1.0 / np.sqrt(a + 4.0 * speed2 / (h * h))
    dtau_fac = -4.0 * tau**3 / (h * h)
    return tau, dtau_fac


def assemble_species(ctx, params, state, flow_state, slot=None, terms=ALL_TERMS,
                     want_matrix=True):
    """Residual (and Jacobian wrt c) of the species system.

    state: scalar dof vector c (ctx.n). flow_state: flow vector (3 ctx.n)
    providing the advection velocity. slot: TimeSlot with a scalar-space
    hist vector, or None for steady.
    """
    n = ctx.n
    c = np.asarray(state, dtype=float)
    U = np.asarray(flow_state, dtype=float)
    k = params.diffusivity
    R = np.zeros(n)
    coo = _Coo() if want_matrix else None
    alpha = 0.0 if slot is None else slot.alpha
    hist = None if slot is None else slot.hist
    t = 0.0 if slot is None else slot.t

    if ctx.vol_w is not None and ctx.vol_w.shape[0]:
        N, gx, gy = ctx.vol_N, ctx.vol_gx, ctx.vol_gy
        dofs = ctx.vol_dofs
        W = ctx.vol_w
        nq = W.shape[0]
        ce = _gather(c, dofs)
        cv = (N * ce).sum(1)
        cx = (gx * ce).sum(1)
        cy = (gy * ce).sum(1)
        ux = (N * _gather(U[0:n], dofs)).sum(1)
        uy = (N * _gather(U[n:2 * n], dofs)).sum(1)
        hv = (N * _gather(hist, dofs)).sum(1) if hist is not None else 0.0
        ct = alpha * cv + hv
        adv = ux * cx + uy * cy
        udotgN = ux[:, None] * gx + uy[:, None] * gy

        r = np.zeros((nq, 4))
        J = np.zeros((nq, 4, 4)) if want_matrix else None
        if GALERKIN in terms:
            r += N * (ct + adv - params.source)[:, None] \
                + k * (gx * cx[:, None] + gy * cy[:, None])
            if want_matrix:
                J += N[:, :, None] * (alpha * N + udotgN)[:, None, :] \
                    + k * (gx[:, :, None] * gx[:, None, :]
                           + gy[:, :, None] * gy[:, None, :])
        if STABILIZATION in terms:
            tau, _ = _tau_species(params, slot, ux * ux + uy * uy, ctx.h)
            # strong diffusion term vanishes exactly for bilinear elements
            strong = ct + adv - params.source
            r += tau[:, None] * udotgN * strong[:, None]
            if want_matrix:
                J += tau[:, None, None] * udotgN[:, :, None] \
                    * (alpha * N + udotgN)[:, None, :]
        _scatter_block(R, coo, dofs, r, J, W)

    if NITSCHE in terms:
        for blk in ctx.boundary:
            region = blk.region
            if not blk.nq or region.species_value is None:
                continue
            _scalar_nitsche(ctx, R, coo, blk, c, k, params.alpha_nitsche,
                            chat=region.species_value)

    if GHOST in terms and ctx.ghost is not None and ctx.ghost.nq:
        _scalar_ghost(ctx, R, coo, c, params.alpha_gp * ctx.h * k)

    J = coo.matrix((n, n)) if want_matrix else None
    return R, J


def _scalar_nitsche(ctx, R, coo, blk, c, k, alpha, chat):
    """Nitsche Dirichlet terms for a scalar diffusive field."""
    N, gx, gy = blk.N, blk.gx, blk.gy
    nx, ny = blk.normal[:, 0], blk.normal[:, 1]
    ce = _gather(c, blk.dofs)
    cv = (N * ce).sum(1)
    cn = ((gx * ce).sum(1) * nx + (gy * ce).sum(1) * ny)  # grad c . n
    gnN = gx * nx[:, None] + gy * ny[:, None]
    dc = cv - chat
    pen = alpha / ctx.h
    r = -N * (k * cn)[:, None] + k * gnN * dc[:, None] + pen * N * dc[:, None]
    J = None
    if coo is not None:
        J = (-k * N[:, :, None] * gnN[:, None, :]
             + k * gnN[:, :, None] * N[:, None, :]
             + pen * N[:, :, None] * N[:, None, :])
    _scatter_block(R, coo, blk.dofs, r, J, blk.w)


def _scalar_ghost(ctx, R, coo, c, gamma_eff):
    """Facet jump penalty gamma_eff * [[grad w . n]] [[grad c . n]]."""
    g = ctx.ghost
    nq = g.nq
    jump = (g.gn1 * _gather(c, g.dofs1)).sum(1) - (g.gn2 * _gather(c, g.dofs2)).sum(1)
    gvec = np.concatenate([g.gn1, -g.gn2], axis=1)
    dref = np.concatenate([g.dofs1, g.dofs2], axis=1)
    np.add.at(R, dref, gvec * (gamma_eff * jump * g.w)[:, None])
    if coo is not None:
        vals = (gamma_eff * g.w)[:, None, None] * gvec[:, :, None] * gvec[:, None, :]
        rows = np.broadcast_to(dref[:, :, None], (nq, 8, 8))
        cols = np.broadcast_to(dref[:, None, :], (nq, 8, 8))
        coo.add(rows, cols, vals)


def species_flow_jacobian(ctx, params, state, flow_state, slot=None):
    """d(species residual)/d(flow state): advection and SUPG couplings."""
    n = ctx.n
    c = np.asarray(state, dtype=float)
    U = np.asarray(flow_state, dtype=float)
    coo = _Coo()
    alpha = 0.0 if slot is None else slot.alpha
    hist = None if slot is None else slot.hist
    if ctx.vol_w is not None and ctx.vol_w.shape[0]:
        N, gx, gy = ctx.vol_N, ctx.vol_gx, ctx.vol_gy
        dofs = ctx.vol_dofs
        W = ctx.vol_w
        nq = W.shape[0]
        ce = _gather(c, dofs)
        cv = (N * ce).sum(1)
        cx = (gx * ce).sum(1)
        cy = (gy * ce).sum(1)
        ux = (N * _gather(U[0:n], dofs)).sum(1)
        uy = (N * _gather(U[n:2 * n], dofs)).sum(1)
        hv = (N * _gather(hist, dofs)).sum(1) if hist is not None else 0.0
        ct = alpha * cv + hv
        strong = ct + ux * cx + uy * cy - params.source
        udotgN = ux[:, None] * gx + uy[:, None] * gy
        tau, dtau_fac = _tau_species(params, slot, ux * ux + uy * uy, ctx.h)

        def outer(a, b):
            return a[:, :, None] * b[:, None, :]

        # galerkin advection + SUPG (test-op, tau, strong-residual chains)
        JX = outer(N, N) * cx[:, None, None] \
            + outer(udotgN * strong[:, None], N) * dtau_fac[:, None, None] * ux[:, None, None] \
            + tau[:, None, None] * (outer(gx, N) * strong[:, None, None]
                                    + outer(udotgN, N) * cx[:, None, None])
        JY = outer(N, N) * cy[:, None, None] \
            + outer(udotgN * strong[:, None], N) * dtau_fac[:, None, None] * uy[:, None, None] \
            + tau[:, None, None] * (outer(gy, N) * strong[:, None, None]
                                    + outer(udotgN, N) * cy[:, None, None])
        JX *= W[:, None, None]
        JY *= W[:, None, None]
        rows = np.broadcast_to(dofs[:, :, None], (nq, 4, 4))
        coo.add(rows, np.broadcast_to(dofs[:, None, :], (nq, 4, 4)), JX)
        coo.add(rows, np.broadcast_to((dofs + n)[:, None, :], (nq, 4, 4)), JY)
    return coo.matrix((n, 3 * n))


def assemble_indicator(ctx, params, state, want_matrix=True):
    """Residual/Jacobian of the linear indicator diffusion-reaction system.

    Unit diffusivity; reaction -h_psi (psi - psi_ref) relaxes isolated
    regions to psi_ref; Nitsche psi = 0 on port regions; own ghost penalty.
    """
    n = ctx.n
    psi = np.asarray(state, dtype=float)
    R = np.zeros(n)
    coo = _Coo() if want_matrix else None
    if ctx.vol_w is not None and ctx.vol_w.shape[0]:
        N, gx, gy = ctx.vol_N, ctx.vol_gx, ctx.vol_gy
        dofs = ctx.vol_dofs
        W = ctx.vol_w
        pe = _gather(psi, dofs)
        pv = (N * pe).sum(1)
        px = (gx * pe).sum(1)
        py = (gy * pe).sum(1)
        r = gx * px[:, None] + gy * py[:, None] \
            - params.reaction * N * (pv - params.psi_ref)[:, None]
        J = None
        if want_matrix:
            J = (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]
                 - params.reaction * N[:, :, None] * N[:, None, :])
        _scatter_block(R, coo, dofs, r, J, W)

    for blk in ctx.boundary:
        if blk.nq and getattr(blk.region, "port", False):
            _scalar_nitsche(ctx, R, coo, blk, psi, 1.0, params.alpha_nitsche, chat=0.0)

    if ctx.ghost is not None and ctx.ghost.nq:
        _scalar_ghost(ctx, R, coo, psi, params.alpha_gp * ctx.h)

    J = coo.matrix((n, n)) if want_matrix else None
    return R, J


def solve_indicator(ctx, params, linear_solve):
    """Single linear solve for the nodal indicator field."""
    n = ctx.n
    psi0 = np.zeros(n)
    R0, J = assemble_indicator(ctx, params, psi0, want_matrix=True)
    return psi0 - linear_solve(J.tocsc(), R0)


def project_indicator(psi_values, params):
    """Sharp tanh projection turning the indicator into a binary switch."""
    arg = params.k_sharpness * (np.asarray(psi_values, dtype=float)
                                - params.k_threshold * params.psi_ref)
    return 0.5 + 0.5 * np.tanh(arg)


def indicator_at_volume_qp(ctx, psi, params):
    """Projected indicator evaluated at the context's volume points."""
    if ctx.vol_w is None or not ctx.vol_w.shape[0]:
        return np.zeros(0)
    psi_q = (ctx.vol_N * _gather(np.asarray(psi, dtype=float), ctx.vol_dofs)).sum(1)
    return project_indicator(psi_q, params)
