"""Theta-scheme momentum step: Gauss-Newton minimization of the stress/velocity functional.

The discrete unknown is ``x = [sigma, u]`` where ``sigma`` holds the two rows
of the stress tensor, each a Raviart-Thomas field, and ``u`` is a vector
Lagrange field vanishing on the boundary.  Pointwise residual components are

* 0..3: ``sigma - C(u)`` (row-major 2x2),
* 4..5: ``rho H (u - u_old)/dt + F(u_theta) - div sigma_theta``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import constitutive as cm
from .assembly import (
    FEContext,
    SolverError,
    apply_dirichlet,
    assemble_ls,
    block_offsets,
    evaluate,
    ls_value,
    solve_spd,
    space,
)
from .transport import TRACER_SPACE

log = logging.getLogger(__name__)

ELEMENT_PAIRS = {"rt0p1": ("RT0", "P1"), "rt1p2": ("RT1", "P2")}


class LineSearchError(RuntimeError):
    def __init__(self, message, slope=0.0, value=0.0):
        super().__init__(message)
        self.slope = slope
        self.value = value


# --------------------------------------------------------------------------
# constitutive laws and forcings used by the functional


class ViscousPlastic:
    """Regularized viscous-plastic stress map and its Gateaux derivative."""

    def __init__(self, params: cm.PhysParams = cm.PhysParams(), trace_factor: float = 2.0):
        self.params = params
        self.trace_factor = trace_factor

    def stress(self, grad_u, P):
        return cm.stress(cm.strain(grad_u, self.params.delta_min), P, self.trace_factor)

    def jacobian(self, grad_u, grad_v, P):
        """J_C(u)[v] for a stack of directions; ``grad_v`` has an extra axis before (2, 2)."""
        su = cm.strain(grad_u[..., None, :, :], self.params.delta_min)
        sv = cm.strain(grad_v, 0.0)
        return cm.jac_stress(su, sv, P[..., None], self.trace_factor)


class LinearLaw:
    """Linear surrogate C(u) = mu * eps(u); independent of the ice strength."""

    def __init__(self, mu: float = 1.0):
        self.mu = mu

    def stress(self, grad_u, P):
        return self.mu * 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))

    def jacobian(self, grad_u, grad_v, P):
        return self.mu * 0.5 * (grad_v + np.swapaxes(grad_v, -1, -2))


class IceForcing:
    """Coriolis, air and water drag with prescribed wind and ocean fields."""

    def __init__(self, params: cm.PhysParams = cm.PhysParams(), wind=None, ocean=None):
        self.params = params
        self.wind = wind
        self.ocean = ocean

    def bind(self, points, t_days):
        shape = points.shape
        v_a = np.zeros(shape) if self.wind is None else self.wind(points, t_days)
        v_o = np.zeros(shape) if self.ocean is None else self.ocean(points)
        params = self.params
        return _BoundIceForcing(params, np.asarray(v_a, float), np.asarray(v_o, float))


@dataclass
class _BoundIceForcing:
    params: cm.PhysParams
    v_a: np.ndarray
    v_o: np.ndarray

    def force(self, u):
        return cm.force(u, self.v_a, self.v_o, self.params)

    def jacobian(self, u):
        return cm.jac_force_matrix(u, self.v_o, self.params)


class LinearForcing:
    """F(u) = K u - g(x) with a constant 2x2 matrix K and a source g."""

    def __init__(self, K=np.zeros((2, 2)), source=None):
        self.K = np.asarray(K, dtype=float)
        self.source = source

    def bind(self, points, t_days):
        g = np.zeros(points.shape) if self.source is None else np.asarray(self.source(points), float)
        return _BoundLinearForcing(self.K, g)


@dataclass
class _BoundLinearForcing:
    K: np.ndarray
    g: np.ndarray

    def force(self, u):
        return u @ self.K.T - self.g

    def jacobian(self, u):
        return np.broadcast_to(self.K, u.shape[:-1] + (2, 2))


# --------------------------------------------------------------------------


@dataclass
class MomentumState:
    sigma: np.ndarray
    u: np.ndarray
    time: float = 0.0  # s


@dataclass
class StepData:
    """Quantities frozen during one time step, sampled at quadrature points."""

    dt: float
    theta: float
    u_old: np.ndarray
    sigma_old: np.ndarray
    u_old_q: np.ndarray
    div_sigma_old_q: np.ndarray
    H_q: np.ndarray
    P_q: np.ndarray
    forcing: object


@dataclass
class GnReport:
    functional: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)
    solver_iterations: list = field(default_factory=list)
    solver_residuals: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.step_norms)


class MomentumProblem:
    def __init__(
        self,
        ctx: FEContext,
        elements: str = "rt0p1",
        law=None,
        forcing=None,
        rho_ice: float = cm.PhysParams.rho_ice,
        params: cm.PhysParams = cm.PhysParams(),
        linear_solver: str = "auto",
    ):
        if elements not in ELEMENT_PAIRS:
            raise ValueError(f"unknown element pair {elements!r}")
        s_name, u_name = ELEMENT_PAIRS[elements]
        self.ctx = ctx
        self.elements = elements
        self.stress_space = space(s_name, 2)
        self.vel_space = space(u_name, 2)
        self.sdm = ctx.dofmap(self.stress_space)
        self.udm = ctx.dofmap(self.vel_space)
        self.dofmaps = [self.sdm, self.udm]
        self.offsets = block_offsets(self.dofmaps)
        self.n = int(self.offsets[-1])
        self.params = params
        self.law = law if law is not None else ViscousPlastic(params)
        self.forcing = forcing if forcing is not None else IceForcing(params)
        self.rho_ice = rho_ice
        self.linear_solver = linear_solver
        self._stab = ctx.table(self.stress_space)
        self._utab = ctx.table(self.vel_space)

    # -- vectors ----------------------------------------------------------
    def split(self, x):
        return x[: self.offsets[1]], x[self.offsets[1] :]

    def join(self, sigma, u):
        return np.concatenate([sigma, u])

    def zero_state(self) -> MomentumState:
        return MomentumState(np.zeros(self.sdm.n_global), np.zeros(self.udm.n_global))

    # -- step data -------------------------------------------------------
    def prepare(self, old: MomentumState, A, H, dt: float, theta: float, t_days: float | None = None) -> StepData:
        """Freeze tracers, previous level and forcing for one step.

        ``t_days`` is the time at which the forcing is evaluated; by default
        the intermediate level t_n + theta dt.
        """
        if dt <= 0.0:
            raise ValueError("time step must be positive")
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        ttab = self.ctx.table(TRACER_SPACE)
        Aq = np.clip(evaluate(ttab, A)[0][..., 0], 0.0, 1.0)
        Hq = np.maximum(evaluate(ttab, H)[0][..., 0], 0.0)
        P = cm.ice_strength(Aq, Hq, self.params)
        u_old_q, _ = evaluate(self._utab, old.u)
        _, div_old = evaluate(self._stab, old.sigma)
        if t_days is None:
            t_days = (old.time + theta * dt) / 86400.0
        forcing = self.forcing.bind(self.ctx.points, t_days)
        return StepData(dt, theta, old.u, old.sigma, u_old_q, div_old, Hq, P, forcing)

    # -- residual and functional -------------------------------------------
    def _fields(self, x):
        sigma, u = self.split(x)
        sv, sdiv = evaluate(self._stab, sigma)
        uv, ug = evaluate(self._utab, u)
        return sv, sdiv, uv, ug

    def residual(self, x, data: StepData):
        sv, sdiv, uv, ug = self._fields(x)
        th = data.theta
        rc = sv - self.law.stress(ug, data.P_q)
        u_th = th * uv + (1.0 - th) * data.u_old_q
        rm = (
            self.rho_ice * data.H_q[..., None] * (uv - data.u_old_q) / data.dt
            + data.forcing.force(u_th)
            - (th * sdiv + (1.0 - th) * data.div_sigma_old_q)
        )
        T, Q = rc.shape[:2]
        return np.concatenate([rc.reshape(T, Q, 4), rm], axis=2)

    def functional_parts(self, x, data: StepData):
        r = self.residual(x, data)
        w = self.ctx.weights
        return ls_value(w, r[..., 4:]), ls_value(w, r[..., :4])

    def functional(self, x, data: StepData) -> float:
        r = self.residual(x, data)
        return ls_value(self.ctx.weights, r)

    def symmetry_defect(self, sigma) -> float:
        sv, _ = evaluate(self._stab, sigma)
        return self.ctx.integrate((sv[..., 0, 1] - sv[..., 1, 0]) ** 2)

    # -- linearization -----------------------------------------------------
    def linearize(self, x, data: StepData):
        """Pointwise linearized operator rows ``(T, Q, 6, n_local)`` and residual."""
        sigma, u = self.split(x)
        uv, ug = evaluate(self._utab, u)
        th = data.theta
        T, Q = self.ctx.weights.shape

        # stress block: two rows, each an RT field
        phi = self._stab.values  # (T, Q, ns, 2)
        dphi = self._stab.divs  # (T, Q, ns)
        ns = phi.shape[2]
        Ls = np.zeros((T, Q, 6, 2 * ns))
        for i in range(2):
            Ls[:, :, 2 * i, i * ns : (i + 1) * ns] = phi[..., 0]
            Ls[:, :, 2 * i + 1, i * ns : (i + 1) * ns] = phi[..., 1]
            Ls[:, :, 4 + i, i * ns : (i + 1) * ns] = -th * dphi

        # velocity block: component c of basis psi has grad v = e_c (x) grad psi
        psi = self._utab.values  # (Q, nu)
        gpsi = self._utab.grads  # (T, Q, nu, 2)
        nu = psi.shape[1]
        u_th = th * uv + (1.0 - th) * data.u_old_q
        JF = data.forcing.jacobian(u_th)  # (T, Q, 2, 2)
        mass = self.rho_ice * data.H_q / data.dt
        Lu = np.zeros((T, Q, 6, 2 * nu))
        for c in range(2):
            gv = np.zeros((T, Q, nu, 2, 2))
            gv[..., c, :] = gpsi
            JC = self.law.jacobian(ug, gv, data.P_q)  # (T, Q, nu, 2, 2)
            Lu[:, :, :4, c * nu : (c + 1) * nu] = -np.moveaxis(JC.reshape(T, Q, nu, 4), 2, 3)
            for m in range(2):
                coef = th * JF[..., m, c]
                if m == c:
                    coef = coef + mass
                Lu[:, :, 4 + m, c * nu : (c + 1) * nu] = coef[..., None] * psi[None]
        rows = np.concatenate([Ls, Lu], axis=3)
        return rows, self.residual(x, data)

    def normal_system(self, x, data: StepData, dirichlet: bool = True):
        rows, r = self.linearize(x, data)
        system = assemble_ls(self.dofmaps, self.ctx.weights, rows, r)
        if dirichlet:
            bnd = self.udm.boundary_dofs
            system = apply_dirichlet(system, self.udm, bnd, 0.0, offset=int(self.offsets[1]))
        return system

    def first_variation(self, x, data: StepData, direction):
        """Derivative of the functional at ``x`` in ``direction`` (assembled form)."""
        system = self.normal_system(x, data, dirichlet=False)
        return float(-2.0 * system.rhs @ direction)

    # -- Gauss-Newton ------------------------------------------------------
    def gn_step(self, x, data: StepData, f0: float | None = None, armijo: float = 1e-4, alpha_min: float = 2.0**-30):
        """One damped Gauss-Newton update; returns ``(x_new, f_new, info)``."""
        if f0 is None:
            f0 = self.functional(x, data)
        system = self.normal_system(x, data)
        try:
            delta, stats = solve_spd(system, method=self.linear_solver, return_stats=True)
        except SolverError as exc:
            raise SolverError(f"Gauss-Newton linear solve failed: {exc}", exc.iterations, exc.pivot) from exc
        slope = -2.0 * float(system.rhs @ delta)
        info = {"delta": delta, "slope": slope, "solver": stats, "alpha": 0.0}
        if slope >= 0.0:
            raise LineSearchError(f"Gauss-Newton direction is not a descent direction (slope {slope:.3e})", slope, f0)
        alpha = 1.0
        while alpha >= alpha_min:
            xt = x + alpha * delta
            ft = self.functional(xt, data)
            if np.isfinite(ft) and ft <= f0 + armijo * alpha * slope:
                info["alpha"] = alpha
                return xt, ft, info
            alpha *= 0.5
        raise LineSearchError(
            f"line search failed: no sufficient decrease down to alpha={alpha_min:.1e} (slope {slope:.3e}, F={f0:.6e})", slope, f0
        )

    def gn_solve(self, old: MomentumState, data: StepData, tol: float = 1e-6, max_iter: int = 50, x0=None, armijo: float = 1e-4):
        """Minimize the step functional by damped Gauss-Newton, warm-started from ``old``."""
        if tol <= 0.0:
            raise ValueError("tolerance must be positive")
        x = self.join(old.sigma, old.u) if x0 is None else np.array(x0, dtype=float)
        f = self.functional(x, data)
        report = GnReport(functional=[f])
        if f == 0.0:
            report.converged, report.reason = True, "zero residual"
        else:
            for _ in range(max_iter):
                try:
                    x_new, f_new, info = self.gn_step(x, data, f, armijo=armijo)
                except LineSearchError as exc:
                    # the best predicted decrease is below tolerance: stationary up to rounding
                    report.converged = abs(exc.slope) <= tol * f
                    report.reason = f"stagnation: {exc}"
                    break
                step = info["alpha"] * info["delta"]
                snorm = float(np.linalg.norm(step) / max(np.linalg.norm(x_new), np.finfo(float).tiny))
                report.step_norms.append(snorm)
                report.step_lengths.append(info["alpha"])
                report.solver_iterations.append(info["solver"].iterations)
                report.solver_residuals.append(info["solver"].relative_residual)
                report.functional.append(f_new)
                decrease = (f - f_new) / f if f > 0.0 else 0.0
                x, f = x_new, f_new
                if f == 0.0 or decrease < tol or snorm < tol:
                    report.converged = True
                    report.reason = "relative decrease" if decrease < tol else "step norm"
                    break
            else:
                report.reason = "max_iter"
        sigma, u = self.split(x)
        return MomentumState(sigma.copy(), u.copy(), old.time + data.dt), report


def functional_value(problem: MomentumProblem, new: MomentumState, data: StepData) -> float:
    return problem.functional(problem.join(new.sigma, new.u), data)
