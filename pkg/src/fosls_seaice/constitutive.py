"""Pointwise viscous-plastic rheology, forcing and their directional derivatives.

All kernels are vectorized: tensors carry their two trailing axes ``(2, 2)``
and vectors a trailing axis of length 2; any leading batch shape broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

EPS_REG = 1e-8  # m/s, floor of |v_o - u| in the drag Jacobian
_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])  # w -> e_r x w = (-w2, w1)


@dataclass(frozen=True)
class PhysParams:
    rho_ice: float = 900.0
    rho_a: float = 1.3
    rho_o: float = 1026.0
    c_a: float = 1.2e-3
    c_o: float = 5.5e-3
    f_c: float = 1.46e-4
    p_star: float = 27.5e3
    c_conc: float = 20.0
    delta_min: float = 2e-9
    v_a_max: float = 15.0
    v_o_max: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"parameter {f.name} must be strictly positive, got {v!r}")


@dataclass(frozen=True)
class StrainState:
    eps: np.ndarray
    dev_eps: np.ndarray
    tr_eps: np.ndarray
    delta: np.ndarray


def _identity_like(tr):
    return np.eye(2) * np.ones(np.shape(tr) + (1, 1))


def ddot(a, b):
    return np.einsum("...ij,...ij->...", a, b)


def strain(grad_u, delta_min: float = PhysParams.delta_min) -> StrainState:
    """Strain rate, its deviator and trace, and the regularized rate Delta."""
    g = np.asarray(grad_u, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("velocity gradient contains non-finite entries")
    eps = 0.5 * (g + np.swapaxes(g, -1, -2))
    tr = eps[..., 0, 0] + eps[..., 1, 1]
    dev = eps - 0.5 * tr[..., None, None] * np.eye(2)
    delta = np.sqrt(ddot(dev, dev) + 4.0 * tr**2 + delta_min**2)
    return StrainState(eps, dev, tr, delta)


def ice_strength(A, H, params: PhysParams = PhysParams(), check: bool = True):
    """P = P* H exp(-C (1 - A))."""
    A = np.asarray(A, dtype=float)
    H = np.asarray(H, dtype=float)
    if check:
        if np.any(A < 0.0) or np.any(A > 1.0):
            raise ValueError("ice concentration outside [0, 1]")
        if np.any(H < 0.0):
            raise ValueError("negative ice height")
    return params.p_star * H * np.exp(-params.c_conc * (1.0 - A))


def _strain_operator(s: StrainState, trace_factor: float):
    return s.dev_eps + trace_factor * s.tr_eps[..., None, None] * np.eye(2)


def stress(s: StrainState, P, trace_factor: float = 2.0):
    """sigma = P/2 ((dev eps + k tr eps I) / Delta - I) with k = ``trace_factor``."""
    P = np.asarray(P, dtype=float)
    M = _strain_operator(s, trace_factor) / s.delta[..., None, None]
    return 0.5 * P[..., None, None] * (M - np.eye(2))


def jac_delta_inv(su: StrainState, sv: StrainState):
    """Directional derivative of 1/Delta(u) in direction v."""
    num = ddot(su.dev_eps, sv.dev_eps) + 4.0 * su.tr_eps * sv.tr_eps
    return -num / su.delta**3


def jac_stress(su: StrainState, sv: StrainState, P, trace_factor: float = 2.0):
    """Directional derivative of the stress map at u in direction v (linear in v)."""
    P = np.asarray(P, dtype=float)
    Mu = _strain_operator(su, trace_factor)
    Mv = _strain_operator(sv, trace_factor)
    jd = jac_delta_inv(su, sv)
    return 0.5 * P[..., None, None] * (Mv / su.delta[..., None, None] + jd[..., None, None] * Mu)


def force(u, v_a, v_o, params: PhysParams = PhysParams()):
    """F(u) = f_c e_r x (u - v_o) - tau_a - tau_o(u)."""
    u = np.asarray(u, dtype=float)
    v_a = np.asarray(v_a, dtype=float)
    v_o = np.asarray(v_o, dtype=float)
    d = v_o - u
    coriolis = params.f_c * ((u - v_o) @ _ROT.T)
    tau_a = params.rho_a * params.c_a * np.linalg.norm(v_a, axis=-1)[..., None] * v_a
    tau_o = params.rho_o * params.c_o * np.linalg.norm(d, axis=-1)[..., None] * d
    return coriolis - tau_a - tau_o


def jac_force_matrix(u, v_o, params: PhysParams = PhysParams(), eps_reg: float = EPS_REG):
    """Matrix of the derivative of :func:`force` with respect to ``u``."""
    d = np.asarray(v_o, dtype=float) - np.asarray(u, dtype=float)
    nd = np.linalg.norm(d, axis=-1)
    drag = nd[..., None, None] * np.eye(2) + np.einsum("...i,...j->...ij", d, d) / np.maximum(nd, eps_reg)[..., None, None]
    return params.f_c * _ROT + params.rho_o * params.c_o * drag


def jac_force(u, v_o, w, params: PhysParams = PhysParams(), eps_reg: float = EPS_REG):
    return np.einsum("...ij,...j->...i", jac_force_matrix(u, v_o, params, eps_reg), np.asarray(w, dtype=float))
