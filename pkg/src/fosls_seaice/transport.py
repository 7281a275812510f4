"""Least-squares advection of ice concentration and height with bound constraints."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import FEContext, SolverError, SparseSystem, Space, assemble_ls, evaluate, ls_value, solve_spd, space

log = logging.getLogger(__name__)

FREE, AT_LOWER, AT_UPPER = 0, -1, 1
TRACER_SPACE = space("P1")


class TransportError(RuntimeError):
    pass


class ActiveSetError(RuntimeError):
    def __init__(self, message, kkt_violation):
        super().__init__(message)
        self.kkt_violation = kkt_violation


@dataclass
class TracerState:
    A: np.ndarray
    H: np.ndarray
    space: Space = TRACER_SPACE


@dataclass
class ActiveSet:
    status: np.ndarray
    multipliers: np.ndarray
    iterations: int = 0

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.status))


@dataclass
class AdvectResult:
    tracers: TracerState
    unconstrained: TracerState
    systems: tuple
    constant: tuple
    active_sets: tuple = (None, None)
    functional: float = float("nan")


def _tracer_integrand(ctx: FEContext, vel_space: Space, u, q_old, dt: float):
    """Rows and residual of dt * G for one tracer (dt-scaled for conditioning)."""
    tab = ctx.table(TRACER_SPACE)
    uv, ug = evaluate(ctx.table(vel_space), u)
    divu = ug[..., 0, 0] + ug[..., 1, 1]
    phi = tab.values[None, :, :]
    adv = np.einsum("tqi,tqni->tqn", uv, tab.grads)
    rows = (phi + dt * (adv + divu[..., None] * phi))[:, :, None, :]
    qv, _ = evaluate(tab, q_old)
    return rows, -qv[..., 0:1]


def tracer_system(ctx: FEContext, vel_space: Space, u, q_old, dt: float):
    """Normal equations of min ||(q - q_old) + dt div(u q)||^2; returns ``(system, ||q_old||^2)``."""
    if dt <= 0.0:
        raise ValueError("time step must be positive")
    rows, r0 = _tracer_integrand(ctx, vel_space, u, q_old, dt)
    dm = ctx.dofmap(TRACER_SPACE)
    return assemble_ls([dm], ctx.weights, rows, r0), ls_value(ctx.weights, r0)


def quadratic_value(system: SparseSystem, constant: float, x: np.ndarray) -> float:
    """Least-squares value x^T A x - 2 b^T x + c of an assembled system."""
    return float(x @ (system.matrix @ x) - 2.0 * system.rhs @ x + constant)


def advect_step(ctx: FEContext, tracers: TracerState, vel_space: Space, u, dt: float, bounded: bool = True) -> AdvectResult:
    """One decoupled transport step for A and H with the velocity of the previous level."""
    systems, consts, raw = [], [], []
    for q in (tracers.A, tracers.H):
        system, c = tracer_system(ctx, vel_space, u, q, dt)
        try:
            x = solve_spd(system)
        except SolverError as exc:
            raise TransportError(f"singular transport system (n={ctx.mesh.n_triangles} triangles, dt={dt}): {exc}") from exc
        systems.append(system)
        consts.append(c)
        raw.append(x)
    unconstrained = TracerState(raw[0], raw[1])
    result = AdvectResult(unconstrained, unconstrained, tuple(systems), tuple(consts))
    if bounded:
        A, asA = enforce_bounds(systems[0], 0.0, 1.0, x0=raw[0])
        H, asH = enforce_bounds(systems[1], 0.0, np.inf, x0=raw[1])
        result.tracers = TracerState(A, H)
        result.active_sets = (asA, asH)
    t = result.tracers
    result.functional = (
        quadratic_value(systems[0], consts[0], t.A) + quadratic_value(systems[1], consts[1], t.H)
    ) / dt**2
    return result


def _reduced_solve(A: sp.csr_matrix, b: np.ndarray, x: np.ndarray, free: np.ndarray) -> np.ndarray:
    out = x.copy()
    if free.any():
        fixed = ~free
        rhs = b[free] - A[free][:, fixed] @ x[fixed]
        Aff = A[free][:, free].tocsc()
        out[free] = spla.spsolve(Aff, rhs) if Aff.shape[0] > 1 else rhs / Aff.toarray().ravel()
    return out


def _kkt_violation(A, b, x, lower, upper, status):
    g = A @ x - b
    mult = np.where(status == AT_LOWER, g, np.where(status == AT_UPPER, -g, 0.0))
    viol = np.zeros_like(x)
    free = status == FREE
    viol[free] = np.abs(g[free])
    viol = np.maximum(viol, np.maximum(lower - x, 0.0))
    viol = np.maximum(viol, np.maximum(x - upper, 0.0))
    viol = np.maximum(viol, np.where(status != FREE, np.maximum(-mult, 0.0), 0.0))
    return mult, float(viol.max(initial=0.0))


def enforce_bounds(system: SparseSystem, lower, upper, x0=None, max_iter: int | None = None):
    """Minimize x^T A x - 2 b^T x subject to lower <= x <= upper.

    Primal-dual active-set iteration seeded by the clipped unconstrained
    minimizer; if the active set cycles, a primal (one constraint at a time)
    active-set method finishes from the current feasible point.  The returned
    multipliers are components of the gradient A x - b with the sign of the
    active bound (non-negative at a KKT point).
    """
    A = system.matrix.tocsr()
    b = np.asarray(system.rhs, dtype=float)
    n = len(b)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,)).copy()
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    if max_iter is None:
        max_iter = max(n, 1)
    x = solve_spd(system) if x0 is None else np.asarray(x0, dtype=float).copy()
    if np.all(x >= lower) and np.all(x <= upper):
        return x, ActiveSet(np.zeros(n, dtype=np.int8), np.zeros(n), 0)

    d = A.diagonal()
    scale = max(float(np.abs(d).max(initial=0.0)), 1e-300)
    tol = 1e-12 * scale * max(1.0, float(np.abs(x).max(initial=0.0)))

    status = np.where(x < lower, AT_LOWER, np.where(x > upper, AT_UPPER, FREE)).astype(np.int8)
    seen = set()
    it = 0
    while it < max_iter:
        it += 1
        x = np.where(status == AT_LOWER, lower, np.where(status == AT_UPPER, upper, x))
        x = _reduced_solve(A, b, x, status == FREE)
        g = A @ x - b
        y = x - g / d
        new = np.where(y < lower - tol / d, AT_LOWER, np.where(y > upper + tol / d, AT_UPPER, FREE)).astype(np.int8)
        # keep dofs that sit on a bound with vanishing multiplier where they are
        if np.array_equal(new, status):
            break
        key = new.tobytes()
        if key in seen:
            log.debug("active set cycling after %d iterations, switching to primal method", it)
            x = np.clip(x, lower, upper)
            x, status, extra = _primal_active_set(A, b, x, lower, upper, tol, max_iter - it)
            it += extra
            break
        seen.add(status.tobytes())
        status = new
    x = np.clip(x, lower, upper)
    x[status == AT_LOWER] = lower[status == AT_LOWER]
    x[status == AT_UPPER] = upper[status == AT_UPPER]
    mult, viol = _kkt_violation(A, b, x, lower, upper, status)
    g_scale = tol + 1e-10 * max(float(np.abs(b).max(initial=0.0)), scale * float(np.abs(x).max(initial=0.0)))
    if viol > g_scale:
        raise ActiveSetError(f"active-set iteration did not converge in {max_iter} iterations (KKT violation {viol:.3e})", viol)
    return x, ActiveSet(status, np.where(status != FREE, mult, 0.0), it)


def _primal_active_set(A, b, x, lower, upper, tol, budget):
    """Feasible primal active-set method (one working-set change per iteration)."""
    n = len(x)
    status = np.where(x <= lower, AT_LOWER, np.where(x >= upper, AT_UPPER, FREE)).astype(np.int8)
    for it in range(1, max(budget, 1) + 1):
        target = _reduced_solve(A, b, x, status == FREE)
        p = target - x
        if np.abs(p).max(initial=0.0) <= 1e-14 * max(1.0, np.abs(x).max(initial=0.0)):
            g = A @ x - b
            mult = np.where(status == AT_LOWER, g, np.where(status == AT_UPPER, -g, np.inf))
            j = int(np.argmin(mult))
            if mult[j] >= -tol:
                return x, status, it
            status[j] = FREE
            continue
        alpha = 1.0
        block = -1
        free = np.flatnonzero(status == FREE)
        for i in free:
            if p[i] < 0.0 and x[i] + p[i] < lower[i]:
                a = (lower[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block, side = a, i, AT_LOWER
            elif p[i] > 0.0 and x[i] + p[i] > upper[i]:
                a = (upper[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block, side = a, i, AT_UPPER
        x = x + alpha * p
        if block >= 0:
            status[block] = side
            x[block] = lower[block] if side == AT_LOWER else upper[block]
    return x, status, budget
