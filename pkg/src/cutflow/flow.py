"""Residual and exact Jacobian of the incompressible Navier-Stokes system.

Dof layout for a context with n scalar dofs: [ux(0:n), uy(n:2n), p(2n:3n)],
equal-order bilinear interpolation for all three fields. Contributions:
volumetric Galerkin, SUPG/PSPG stabilization, Nitsche Dirichlet terms on
external boundaries and on the immersed interface, Neumann tractions, the
indicator-gated average-pressure penalty, and the viscous / pressure /
convective ghost penalties on the facet set next to the interface.

The stabilization time scale tau is evaluated from the current state and
differentiated exactly. The velocity-dependent penalty factors (Nitsche
gamma, pressure and convective ghost gammas) are evaluated from a frozen
coefficient state and not differentiated; Newton updates the coefficient
state once per iteration, so the converged solution is unaffected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .solve import STEADY_SLOT, TimeSlot  # noqa: F401  (re-exported for callers)

GALERKIN = "galerkin"
STABILIZATION = "stabilization"
NITSCHE = "nitsche"
NEUMANN = "neumann"
PRESSURE_PENALTY = "pressure_penalty"
GHOST = "ghost"
ALL_TERMS = frozenset(
    (GALERKIN, STABILIZATION, NITSCHE, NEUMANN, PRESSURE_PENALTY, GHOST)
)


@dataclass
class FlowParams:
    """Material and penalty constants for the flow system."""

    rho: float = 1.0
    mu: float = 1.0
    alpha_nitsche: float = 100.0
    alpha_gp_mu: float = 0.05
    alpha_gp_p: float = 0.005
    alpha_gp_u: float = 0.05
    k_pressure: float = 1.0
    # include the (2/dt)^2 term in tau; switching it off keeps the spatial
    # stabilization step-size independent (useful for temporal order studies
    # and for very small steps, where a dt-scaled tau starves the PSPG term)
    tau_time_term: bool = True
    # adjoint-consistency signs: skew pressure, symmetric viscous (fixed)
    beta_pressure: float = -1.0
    beta_viscous: float = 1.0

    def __post_init__(self):
        if self.rho <= 0 or self.mu <= 0:
            raise ValueError("rho and mu must be positive")
        for a in (self.alpha_nitsche, self.alpha_gp_mu, self.alpha_gp_p, self.alpha_gp_u):
            if a < 0:
                raise ValueError("penalty constants must be nonnegative")


STEADY = STEADY_SLOT


class _Coo:
    """Triplet accumulator for one assembly pass."""

    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        self.rows.append(np.asarray(rows, dtype=np.int64).ravel())
        self.cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self.vals.append(np.asarray(vals, dtype=np.float64).ravel())

    def matrix(self, shape):
        if not self.rows:
            return sp.csr_matrix(shape)
        return sp.csr_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape,
        )


def _block_dofs(dofs, n):
    """12-slot dof layout [ux, uy, p] for one quadrature batch (nq, 4)."""
    return np.concatenate([dofs, dofs + n, dofs + 2 * n], axis=1)


def _scatter_block(R, coo, dref, r_local, j_local, w):
    """Apply weights and scatter a local residual/Jacobian batch."""
    np.add.at(R, dref, r_local * w[:, None])
    if coo is not None and j_local is not None:
        jw = j_local * w[:, None, None]
        nq, nd, _ = jw.shape
        rows = np.broadcast_to(dref[:, :, None], (nq, nd, nd))
        cols = np.broadcast_to(dref[:, None, :], (nq, nd, nd))
        coo.add(rows, cols, jw)


def _tau(params, slot, speed2, h):
    """Stabilization time scale and its derivative factor wrt velocity."""
    nu = params.mu / params.rho
    a = (4.0 * nu / (h * h)) ** 2
    if slot.dt is not None and getattr(params, "tau_time_term", True):
        a = a + (2.0 / slot.dt) ** 2
    tau = 1.0 / np.sqrt(a + 4.0 * speed2 / (h * h))
    dtau_fac = -4.0 * tau**3 / (h * h)  # d(tau)/d(u_e) = dtau_fac * u_e
    return tau, dtau_fac


def assemble_flow(ctx, params, state, coeff_state=None, slot=STEADY,
                  psibar=None, terms=ALL_TERMS, want_matrix=True):
    """Assemble the flow residual (and Jacobian) on one integration context.

    state, coeff_state: vectors of length 3 * ctx.n. psibar: projected
    indicator at the volume quadrature points (None disables the pressure
    penalty). Returns (R, J) with J None when want_matrix is False.
    """
    n = ctx.n
    U = np.asarray(state, dtype=float)
    Uc = U if coeff_state is None else np.asarray(coeff_state, dtype=float)
    R = np.zeros(3 * n)
    coo = _Coo() if want_matrix else None

    hist = slot.hist if slot.hist is not None else np.zeros(3 * n)

    if ctx.vol_w is not None and ctx.vol_w.shape[0]:
        _volume_terms(ctx, params, U, Uc, hist, slot, psibar, terms, R, coo)

    if NITSCHE in terms:
        blk = ctx.interface
        if blk is not None and blk.nq:
            uhat = np.zeros((blk.nq, 2))  # no-slip interface default
            _nitsche_velocity(ctx, params, U, Uc, blk, uhat, R, coo)
        for blk in ctx.boundary:
            if not blk.nq:
                continue
            region = blk.region
            if region.kind == "velocity":
                uhat = region.velocity_at(blk.x, slot.t)
                _nitsche_velocity(ctx, params, U, Uc, blk, uhat, R, coo)
            elif region.kind == "symmetry":
                _nitsche_symmetry(ctx, params, U, Uc, blk, R, coo)

    if NEUMANN in terms:
        for blk in ctx.boundary:
            if blk.nq and blk.region.kind == "traction":
                that = blk.region.traction_at(blk.x, slot.t)
                dref = _block_dofs(blk.dofs, n)
                r = np.zeros((blk.nq, 12))
                r[:, 0:4] = -blk.N * that[:, 0:1]
                r[:, 4:8] = -blk.N * that[:, 1:2]
                np.add.at(R, dref, r * blk.w[:, None])

    if GHOST in terms and ctx.ghost is not None and ctx.ghost.nq:
        _ghost_terms(ctx, params, U, Uc, R, coo)

    J = coo.matrix((3 * n, 3 * n)) if want_matrix else None
    return R, J


def _gather(vec, dofs):
    return vec[dofs]


def _volume_terms(ctx, params, U, Uc, hist, slot, psibar, terms, R, coo):
    n = ctx.n
    rho, mu = params.rho, params.mu
    N, gx, gy, d2 = ctx.vol_N, ctx.vol_gx, ctx.vol_gy, ctx.vol_d2
    dofs = ctx.vol_dofs
    W = ctx.vol_w
    nq = W.shape[0]
    want_j = coo is not None

    uxe = _gather(U[0:n], dofs)
    uye = _gather(U[n:2 * n], dofs)
    pe = _gather(U[2 * n:3 * n], dofs)
    ux = (N * uxe).sum(1)
    uy = (N * uye).sum(1)
    p = (N * pe).sum(1)
    uxx = (gx * uxe).sum(1)
    uxy = (gy * uxe).sum(1)
    uyx = (gx * uye).sum(1)
    uyy = (gy * uye).sum(1)
    px = (gx * pe).sum(1)
    py = (gy * pe).sum(1)
    d2x = (d2 * uxe).sum(1)  # d2(ux)/dxdy
    d2y = (d2 * uye).sum(1)

    hx = (N * _gather(hist[0:n], dofs)).sum(1)
    hy = (N * _gather(hist[n:2 * n], dofs)).sum(1)
    alpha = slot.alpha
    utx = alpha * ux + hx
    uty = alpha * uy + hy

    conv_x = ux * uxx + uy * uxy
    conv_y = ux * uyx + uy * uyy
    exy = 0.5 * (uxy + uyx)

    dref = _block_dofs(dofs, n)
    X, Y, P = slice(0, 4), slice(4, 8), slice(8, 12)
    r = np.zeros((nq, 12))
    J = np.zeros((nq, 12, 12)) if want_j else None
    udotgN = ux[:, None] * gx + uy[:, None] * gy

    if GALERKIN in terms:
        r[:, X] += N * (rho * (utx + conv_x))[:, None] \
            + 2 * mu * (uxx[:, None] * gx + exy[:, None] * gy) - p[:, None] * gx
        r[:, Y] += N * (rho * (uty + conv_y))[:, None] \
            + 2 * mu * (exy[:, None] * gx + uyy[:, None] * gy) - p[:, None] * gy
        r[:, P] += N * (uxx + uyy)[:, None]
        if want_j:
            NaNb = N[:, :, None] * N[:, None, :]
            J[:, X, X] += rho * N[:, :, None] * (
                alpha * N + udotgN + uxx[:, None] * N
            )[:, None, :] + 2 * mu * (
                gx[:, :, None] * gx[:, None, :] + 0.5 * gy[:, :, None] * gy[:, None, :]
            )
            J[:, X, Y] += rho * uxy[:, None, None] * NaNb \
                + mu * gy[:, :, None] * gx[:, None, :]
            J[:, X, P] += -gx[:, :, None] * N[:, None, :]
            J[:, Y, X] += rho * uyx[:, None, None] * NaNb \
                + mu * gx[:, :, None] * gy[:, None, :]
            J[:, Y, Y] += rho * N[:, :, None] * (
                alpha * N + udotgN + uyy[:, None] * N
            )[:, None, :] + 2 * mu * (
                gy[:, :, None] * gy[:, None, :] + 0.5 * gx[:, :, None] * gx[:, None, :]
            )
            J[:, Y, P] += -gy[:, :, None] * N[:, None, :]
            J[:, P, X] += N[:, :, None] * gx[:, None, :]
            J[:, P, Y] += N[:, :, None] * gy[:, None, :]

    if PRESSURE_PENALTY in terms and psibar is not None and params.k_pressure != 0.0:
        kp = params.k_pressure
        r[:, P] += (kp * psibar * p)[:, None] * N
        if want_j:
            J[:, P, P] += (kp * psibar)[:, None, None] * N[:, :, None] * N[:, None, :]

    if STABILIZATION in terms:
        tau, dtau_fac = _tau(params, slot, ux * ux + uy * uy, ctx.h)
        Sx = rho * (utx + conv_x) + px - mu * d2y
        Sy = rho * (uty + conv_y) + py - mu * d2x
        r[:, X] += tau[:, None] * udotgN * Sx[:, None]
        r[:, Y] += tau[:, None] * udotgN * Sy[:, None]
        r[:, P] += (tau / rho)[:, None] * (gx * Sx[:, None] + gy * Sy[:, None])
        if want_j:
            dSx_dux = rho * (alpha * N + udotgN + uxx[:, None] * N)
            dSx_duy = rho * uxy[:, None] * N - mu * d2
            dSy_dux = rho * uyx[:, None] * N - mu * d2
            dSy_duy = rho * (alpha * N + udotgN + uyy[:, None] * N)
            dtau_x = (dtau_fac * ux)[:, None] * N  # (nq, 4b)
            dtau_y = (dtau_fac * uy)[:, None] * N

            def outer(a, b):
                return a[:, :, None] * b[:, None, :]

            # velocity-test rows
            for rows, S, dS_dux, dS_duy, gdir in (
                (X, Sx, dSx_dux, dSx_duy, gx),
                (Y, Sy, dSy_dux, dSy_duy, gy),
            ):
                J[:, rows, X] += outer(udotgN * S[:, None], dtau_x) \
                    + tau[:, None, None] * (
                        outer(gx, N) * S[:, None, None] + outer(udotgN, dS_dux))
                J[:, rows, Y] += outer(udotgN * S[:, None], dtau_y) \
                    + tau[:, None, None] * (
                        outer(gy, N) * S[:, None, None] + outer(udotgN, dS_duy))
                J[:, rows, P] += tau[:, None, None] * outer(udotgN, gdir)
            # pressure-test rows
            gS = gx * Sx[:, None] + gy * Sy[:, None]
            J[:, P, X] += outer(gS, dtau_x) / rho + (tau / rho)[:, None, None] * (
                outer(gx, dSx_dux) + outer(gy, dSy_dux))
            J[:, P, Y] += outer(gS, dtau_y) / rho + (tau / rho)[:, None, None] * (
                outer(gx, dSx_duy) + outer(gy, dSy_duy))
            J[:, P, P] += (tau / rho)[:, None, None] * (
                outer(gx, gx) + outer(gy, gy))

    _scatter_block(R, coo, dref, r, J, W)


def _nitsche_gamma(ctx, params, blk, Uc):
    """Frozen Nitsche velocity penalty at surface quadrature points."""
    n = ctx.n
    ucx = (blk.N * _gather(Uc[0:n], blk.dofs)).sum(1)
    ucy = (blk.N * _gather(Uc[n:2 * n], blk.dofs)).sum(1)
    uinf = np.maximum(np.abs(ucx), np.abs(ucy))
    return params.alpha_nitsche * (params.mu / ctx.h + params.rho * uinf / 6.0)


def _nitsche_velocity(ctx, params, U, Uc, blk, uhat, R, coo):
    n = ctx.n
    mu = params.mu
    bp = params.beta_pressure
    N, gx, gy = blk.N, blk.gx, blk.gy
    nx, ny = blk.normal[:, 0], blk.normal[:, 1]
    dofs = blk.dofs
    nq = blk.nq
    want_j = coo is not None

    uxe = _gather(U[0:n], dofs)
    uye = _gather(U[n:2 * n], dofs)
    pe = _gather(U[2 * n:3 * n], dofs)
    ux = (N * uxe).sum(1)
    uy = (N * uye).sum(1)
    p = (N * pe).sum(1)
    uxx = (gx * uxe).sum(1)
    uxy = (gy * uxe).sum(1)
    uyx = (gx * uye).sum(1)
    uyy = (gy * uye).sum(1)
    exy = 0.5 * (uxy + uyx)
    dux = ux - uhat[:, 0]
    duy = uy - uhat[:, 1]
    gamma = _nitsche_gamma(ctx, params, blk, Uc)

    gnN = gx * nx[:, None] + gy * ny[:, None]
    edotn_x = uxx * nx + exy * ny
    edotn_y = exy * nx + uyy * ny
    gdotdu = gx * dux[:, None] + gy * duy[:, None]

    dref = _block_dofs(dofs, n)
    X, Y, P = slice(0, 4), slice(4, 8), slice(8, 12)
    r = np.zeros((nq, 12))
    # standard consistency + viscous adjoint (beta_mu = +1) + penalty
    r[:, X] += N * (p * nx - 2 * mu * edotn_x)[:, None] \
        - mu * (gnN * dux[:, None] + nx[:, None] * gdotdu) \
        + gamma[:, None] * N * dux[:, None]
    r[:, Y] += N * (p * ny - 2 * mu * edotn_y)[:, None] \
        - mu * (gnN * duy[:, None] + ny[:, None] * gdotdu) \
        + gamma[:, None] * N * duy[:, None]
    # pressure adjoint (beta_p = -1)
    r[:, P] += bp * N * (nx * dux + ny * duy)[:, None]

    J = None
    if want_j:
        J = np.zeros((nq, 12, 12))

        def outer(a, b):
            return a[:, :, None] * b[:, None, :]

        # d(eps n)_x/dux_b = 0.5(gnN_b + nx gx_b); /duy_b = 0.5 ny gx_b
        dex_dux = 0.5 * (gnN + nx[:, None] * gx)
        dex_duy = 0.5 * ny[:, None] * gx
        dey_dux = 0.5 * nx[:, None] * gy
        dey_duy = 0.5 * (gnN + ny[:, None] * gy)

        J[:, X, P] += outer(N * nx[:, None], N)
        J[:, Y, P] += outer(N * ny[:, None], N)
        J[:, X, X] += -2 * mu * outer(N, dex_dux) \
            - mu * (outer(gnN, N) + nx[:, None, None] * outer(gx, N)) \
            + gamma[:, None, None] * outer(N, N)
        J[:, X, Y] += -2 * mu * outer(N, dex_duy) \
            - mu * nx[:, None, None] * outer(gy, N)
        J[:, Y, X] += -2 * mu * outer(N, dey_dux) \
            - mu * ny[:, None, None] * outer(gx, N)
        J[:, Y, Y] += -2 * mu * outer(N, dey_duy) \
            - mu * (outer(gnN, N) + ny[:, None, None] * outer(gy, N)) \
            + gamma[:, None, None] * outer(N, N)
        J[:, P, X] += bp * outer(N * nx[:, None], N)
        J[:, P, Y] += bp * outer(N * ny[:, None], N)

    _scatter_block(R, coo, dref, r, J, blk.w)


def _nitsche_symmetry(ctx, params, U, Uc, blk, R, coo):
    """Weak u.n = 0 with free tangential traction."""
    n = ctx.n
    mu = params.mu
    bp = params.beta_pressure
    N, gx, gy = blk.N, blk.gx, blk.gy
    nx, ny = blk.normal[:, 0], blk.normal[:, 1]
    dofs = blk.dofs
    nq = blk.nq
    want_j = coo is not None

    uxe = _gather(U[0:n], dofs)
    uye = _gather(U[n:2 * n], dofs)
    pe = _gather(U[2 * n:3 * n], dofs)
    ux = (N * uxe).sum(1)
    uy = (N * uye).sum(1)
    p = (N * pe).sum(1)
    uxx = (gx * uxe).sum(1)
    uxy = (gy * uxe).sum(1)
    uyx = (gx * uye).sum(1)
    uyy = (gy * uye).sum(1)
    exy = 0.5 * (uxy + uyx)
    un = ux * nx + uy * ny
    nen = uxx * nx * nx + 2 * exy * nx * ny + uyy * ny * ny
    gamma = _nitsche_gamma(ctx, params, blk, Uc)
    gnN = gx * nx[:, None] + gy * ny[:, None]

    dref = _block_dofs(dofs, n)
    X, Y, P = slice(0, 4), slice(4, 8), slice(8, 12)
    r = np.zeros((nq, 12))
    cons = p - 2 * mu * nen
    r[:, X] += N * (nx * cons)[:, None] - 2 * mu * nx[:, None] * gnN * un[:, None] \
        + gamma[:, None] * N * (nx * un)[:, None]
    r[:, Y] += N * (ny * cons)[:, None] - 2 * mu * ny[:, None] * gnN * un[:, None] \
        + gamma[:, None] * N * (ny * un)[:, None]
    r[:, P] += bp * N * un[:, None]

    J = None
    if want_j:
        J = np.zeros((nq, 12, 12))

        def outer(a, b):
            return a[:, :, None] * b[:, None, :]

        dnen_dux = (nx * nx)[:, None] * gx + (nx * ny)[:, None] * gy
        dnen_duy = (ny * ny)[:, None] * gy + (nx * ny)[:, None] * gx
        for rows, nd in ((X, nx), (Y, ny)):
            J[:, rows, P] += outer(N * nd[:, None], N)
            J[:, rows, X] += -2 * mu * outer(N * nd[:, None], dnen_dux) \
                - 2 * mu * outer(nd[:, None] * gnN, N * nx[:, None]) \
                + gamma[:, None, None] * outer(N * nd[:, None], N * nx[:, None])
            J[:, rows, Y] += -2 * mu * outer(N * nd[:, None], dnen_duy) \
                - 2 * mu * outer(nd[:, None] * gnN, N * ny[:, None]) \
                + gamma[:, None, None] * outer(N * nd[:, None], N * ny[:, None])
        J[:, P, X] += bp * outer(N, N * nx[:, None])
        J[:, P, Y] += bp * outer(N, N * ny[:, None])

    _scatter_block(R, coo, dref, r, J, blk.w)


def _ghost_terms(ctx, params, U, Uc, R, coo):
    n = ctx.n
    g = ctx.ghost
    h = ctx.h
    nq = g.nq
    want_j = coo is not None

    # frozen convective / inf-norm velocities from the coefficient state
    uc1x = (g.N1 * _gather(Uc[0:n], g.dofs1)).sum(1)
    uc1y = (g.N1 * _gather(Uc[n:2 * n], g.dofs1)).sum(1)
    uc2x = (g.N2 * _gather(Uc[0:n], g.dofs2)).sum(1)
    uc2y = (g.N2 * _gather(Uc[n:2 * n], g.dofs2)).sum(1)
    ucx = 0.5 * (uc1x + uc2x)
    ucy = 0.5 * (uc1y + uc2y)
    un = ucx * g.normal[:, 0] + ucy * g.normal[:, 1]
    uinf = np.maximum(np.abs(ucx), np.abs(ucy))

    gamma_vel = params.alpha_gp_mu * params.mu * h \
        + params.alpha_gp_u * params.rho * np.abs(un) * h * h
    gamma_p = params.alpha_gp_p * h * h / (params.mu / h + params.rho * uinf / 6.0)

    jump_ux = (g.gn1 * _gather(U[0:n], g.dofs1)).sum(1) \
        - (g.gn2 * _gather(U[0:n], g.dofs2)).sum(1)
    jump_uy = (g.gn1 * _gather(U[n:2 * n], g.dofs1)).sum(1) \
        - (g.gn2 * _gather(U[n:2 * n], g.dofs2)).sum(1)
    jump_p = (g.gn1 * _gather(U[2 * n:3 * n], g.dofs1)).sum(1) \
        - (g.gn2 * _gather(U[2 * n:3 * n], g.dofs2)).sum(1)

    gvec = np.concatenate([g.gn1, -g.gn2], axis=1)  # (nq, 8)
    dref8 = np.concatenate([g.dofs1, g.dofs2], axis=1)

    for offset, jump, gamma in (
        (0, jump_ux, gamma_vel),
        (n, jump_uy, gamma_vel),
        (2 * n, jump_p, gamma_p),
    ):
        r = gvec * (gamma * jump)[:, None] * g.w[:, None]
        np.add.at(R, dref8 + offset, r)
        if want_j:
            jmat = (gamma * g.w)[:, None, None] * gvec[:, :, None] * gvec[:, None, :]
            rows = np.broadcast_to((dref8 + offset)[:, :, None], (nq, 8, 8))
            cols = np.broadcast_to((dref8 + offset)[:, None, :], (nq, 8, 8))
            coo.add(rows, cols, jmat)


def flow_time_matrix(ctx, params, state, slot=STEADY):
    """d(residual)/d(du/dt slot): mass-like matrix including stabilization.

    Used by the transient adjoint for cross-step couplings; evaluated at the
    step's own state (tau and the test operator depend on it).
    """
    n = ctx.n
    rho = params.rho
    coo = _Coo()
    if ctx.vol_w is not None and ctx.vol_w.shape[0]:
        U = np.asarray(state, dtype=float)
        N, gx, gy = ctx.vol_N, ctx.vol_gx, ctx.vol_gy
        dofs = ctx.vol_dofs
        W = ctx.vol_w
        uxe = _gather(U[0:n], dofs)
        uye = _gather(U[n:2 * n], dofs)
        ux = (N * uxe).sum(1)
        uy = (N * uye).sum(1)
        tau, _ = _tau(params, slot, ux * ux + uy * uy, ctx.h)
        udotgN = ux[:, None] * gx + uy[:, None] * gy
        dref = _block_dofs(dofs, n)
        nq = W.shape[0]
        J = np.zeros((nq, 12, 12))
        X, Y, P = slice(0, 4), slice(4, 8), slice(8, 12)

        def outer(a, b):
            return a[:, :, None] * b[:, None, :]

        galerkin = rho * outer(N, N)
        supg = rho * tau[:, None, None] * outer(udotgN, N)
        J[:, X, X] += galerkin + supg
        J[:, Y, Y] += galerkin + supg
        J[:, P, X] += tau[:, None, None] * outer(gx, N)
        J[:, P, Y] += tau[:, None, None] * outer(gy, N)
        jw = J * W[:, None, None]
        rows = np.broadcast_to(dref[:, :, None], (nq, 12, 12))
        cols = np.broadcast_to(dref[:, None, :], (nq, 12, 12))
        coo.add(rows, cols, jw)
    return coo.matrix((3 * n, 3 * n))


def flow_indicator_jacobian(ctx, params, state, psi, indicator_params):
    """d(flow residual)/d(psi): the pressure penalty's indicator coupling."""
    n = ctx.n
    coo = _Coo()
    if ctx.vol_w is not None and ctx.vol_w.shape[0] and params.k_pressure != 0.0:
        U = np.asarray(state, dtype=float)
        psi_q = (ctx.vol_N * _gather(np.asarray(psi, dtype=float), ctx.vol_dofs)).sum(1)
        pe = _gather(U[2 * n:3 * n], ctx.vol_dofs)
        p = (ctx.vol_N * pe).sum(1)
        kw, kt, pinf = (indicator_params.k_sharpness, indicator_params.k_threshold,
                        indicator_params.psi_ref)
        th = np.tanh(kw * (psi_q - kt * pinf))
        dproj = 0.5 * kw * (1.0 - th * th)
        vals = (params.k_pressure * p * dproj * ctx.vol_w)[:, None, None] \
            * ctx.vol_N[:, :, None] * ctx.vol_N[:, None, :]
        rows = np.broadcast_to((ctx.vol_dofs + 2 * n)[:, :, None], vals.shape)
        cols = np.broadcast_to(ctx.vol_dofs[:, None, :], vals.shape)
        coo.add(rows, cols, vals)
    return coo.matrix((3 * n, n))
