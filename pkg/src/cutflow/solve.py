"""Nonlinear, linear and temporal solution drivers.

Newton iterations with relative-residual control wrap a sparse direct
solve by default (an ILU-preconditioned GMRES mode exists for parity);
transient problems march with BDF2 after a single backward-Euler startup
step. The steady driver falls back to pseudo-transient continuation with
a growing step when a cold Newton start diverges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NonconvergenceError, SolverError


@dataclass
class TimeSlot:
    """Time-derivative bookkeeping for one nonlinear solve.

    du/dt is represented as alpha * u + hist with hist combining stored
    history levels; steady mode uses alpha = 0, hist = None, dt = None.
    t is the evaluation time for boundary data.
    """

    alpha: float = 0.0
    hist: np.ndarray = None
    dt: float = None
    t: float = 0.0


STEADY_SLOT = TimeSlot()


@dataclass
class SolveConfig:
    newton_tol: float = 1e-6
    newton_abs_floor: float = 1e-14
    max_newton: int = 30
    linear_method: str = "direct"  # 'direct' | 'iterative'
    linear_tol: float = 1e-6
    dt: float = None
    n_steps: int = 0
    scheme: str = "steady"  # 'steady' | 'bdf2'
    pseudo_dt0: float = 0.1
    pseudo_steps: int = 8

    def __post_init__(self):
        if self.newton_tol <= 0 or self.linear_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.scheme == "bdf2" and (self.dt is None or self.dt <= 0):
            raise ValueError("transient mode requires a positive dt")


def linear_solve(A, b, method="direct", tol=1e-6):
    """Solve A x = b; sparse direct by default.

    Raises SolverError on singular systems or iterative breakdown.
    """
    b = np.asarray(b, dtype=float)
    if not sp.issparse(A):
        A = np.asarray(A, dtype=float)
        try:
            return np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"dense solve failed: {exc}") from exc
    A = A.tocsc()
    if method == "direct":
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise SolverError(f"sparse LU failed: {exc}") from exc
        x = lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SolverError("sparse LU produced non-finite values (singular system)")
        return x
    if method == "iterative":
        try:
            ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        except RuntimeError as exc:
            raise SolverError(f"ILU factorization failed: {exc}") from exc
        M = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, rtol=tol, atol=0.0, M=M, restart=100, maxiter=2000)
        if info != 0:
            raise SolverError(f"GMRES did not converge (info={info})")
        return x
    raise ValueError(f"unknown linear method {method!r}")


def newton_solve(assemble, x0, tol=1e-6, abs_floor=1e-14, max_iter=30,
                 linear_method="direct", linear_tol=1e-6):
    """Newton iteration on assemble(x) -> (R, J).

    Converges when ||R|| / max(||R0||, floor/tol... ) drops below tol, with
    an absolute floor for problems that start essentially converged.
    Returns (x, trace); trace holds the residual norms per iteration.
    """
    x = np.array(x0, dtype=float)
    trace = []
    r0 = None
    for _ in range(max_iter + 1):
        R, J = assemble(x)
        norm = float(np.linalg.norm(R))
        trace.append(norm)
        if r0 is None:
            r0 = norm
        if norm <= max(tol * r0, abs_floor):
            return x, trace
        if not np.isfinite(norm) or norm > 1e3 * max(r0, 1.0) + 1e12:
            raise NonconvergenceError("Newton diverged", trace=trace)
        dx = linear_solve(J, R, method=linear_method, tol=linear_tol)
        x -= dx
    raise NonconvergenceError(
        f"Newton did not converge in {max_iter} iterations", trace=trace
    )


def bdf_slot(step, dt, states, t=None):
    """TimeSlot for the given step index (1-based); BE startup then BDF2."""
    if t is None:
        t = step * dt
    if step == 1:
        return TimeSlot(alpha=1.0 / dt, hist=-states[0] / dt, dt=dt, t=t)
    return TimeSlot(
        alpha=1.5 / dt,
        hist=(-2.0 * states[-1] + 0.5 * states[-2]) / dt,
        dt=dt,
        t=t,
    )


def march(make_assemble, u0, config: SolveConfig):
    """Time marching; returns (state history, per-step Newton traces).

    make_assemble(slot) must return an assemble(x) -> (R, J) callable for
    that step's time slot. History includes the initial condition.
    """
    if config.dt is None or config.dt <= 0 or config.n_steps < 1:
        raise ValueError("march requires dt > 0 and n_steps >= 1")
    states = [np.array(u0, dtype=float)]
    traces = []
    for step in range(1, config.n_steps + 1):
        slot = bdf_slot(step, config.dt, states)
        try:
            u, trace = newton_solve(
                make_assemble(slot), states[-1],
                tol=config.newton_tol, abs_floor=config.newton_abs_floor,
                max_iter=config.max_newton, linear_method=config.linear_method,
                linear_tol=config.linear_tol,
            )
        except NonconvergenceError as exc:
            raise NonconvergenceError(
                f"time step {step} failed: {exc}", trace=exc.trace, step=step
            ) from exc
        states.append(u)
        traces.append(trace)
    return states, traces


def steady_solve(make_assemble, warm, config: SolveConfig, final_time=0.0):
    """Steady solve with optional pseudo-transient continuation fallback."""
    steady = TimeSlot(t=final_time)
    try:
        return newton_solve(
            make_assemble(steady), warm,
            tol=config.newton_tol, abs_floor=config.newton_abs_floor,
            max_iter=config.max_newton, linear_method=config.linear_method,
            linear_tol=config.linear_tol,
        )
    except (NonconvergenceError, SolverError):
        pass  # cold Newton diverged (possibly into a singular Jacobian)
    u = np.array(warm, dtype=float)
    dt = config.pseudo_dt0
    combined = []
    for _ in range(config.pseudo_steps):
        slot = TimeSlot(alpha=1.0 / dt, hist=-u / dt, dt=dt, t=final_time)
        try:
            u, trace = newton_solve(
                make_assemble(slot), u,
                tol=max(config.newton_tol, 1e-4), abs_floor=config.newton_abs_floor,
                max_iter=config.max_newton, linear_method=config.linear_method,
                linear_tol=config.linear_tol,
            )
            combined.extend(trace)
        except NonconvergenceError:
            dt *= 0.25  # retreat and try a smaller pseudo step
            continue
        dt *= 2.0
    try:
        x, trace = newton_solve(
            make_assemble(steady), u,
            tol=config.newton_tol, abs_floor=config.newton_abs_floor,
            max_iter=config.max_newton, linear_method=config.linear_method,
            linear_tol=config.linear_tol,
        )
        return x, combined + trace
    except NonconvergenceError as exc:
        raise NonconvergenceError(
            "steady solve failed after pseudo-transient continuation",
            trace=combined + exc.trace,
        ) from exc
