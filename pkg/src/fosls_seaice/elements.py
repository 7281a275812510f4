"""Reference elements on the unit triangle, quadrature and the affine/Piola maps.

Reference triangle has vertices (0,0), (1,0), (0,1).  Local edge ``k`` is the
edge opposite local vertex ``k`` and is traversed counterclockwise from vertex
``k+1`` to vertex ``k+2`` (indices mod 3).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REFERENCE_AREA = 0.5
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])
# outward normals (unnormalized, length = edge length) of the reference edges
_REF_EDGE_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
_BARY_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

LAGRANGE = "lagrange"
RAVIART_THOMAS = "rt"


class ElementError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceElement:
    family: str
    degree: int
    dofs_per_vertex: int
    dofs_per_edge: int
    dofs_per_cell: int

    @property
    def n_local(self) -> int:
        return 3 * self.dofs_per_vertex + 3 * self.dofs_per_edge + self.dofs_per_cell

    def evaluate(self, points):
        if self.family == LAGRANGE:
            return eval_lagrange(self.degree, points)
        return eval_rt(self.degree, points)


def reference_element(family: str, degree: int) -> ReferenceElement:
    if family == LAGRANGE and degree == 1:
        return ReferenceElement(LAGRANGE, 1, 1, 0, 0)
    if family == LAGRANGE and degree == 2:
        return ReferenceElement(LAGRANGE, 2, 1, 1, 0)
    if family == RAVIART_THOMAS and degree == 0:
        return ReferenceElement(RAVIART_THOMAS, 0, 0, 1, 0)
    if family == RAVIART_THOMAS and degree == 1:
        return ReferenceElement(RAVIART_THOMAS, 1, 0, 2, 2)
    raise ElementError(f"unsupported element {family} of degree {degree}")


# --------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


MAX_QUADRATURE_ORDER = 6


@lru_cache(maxsize=None)
def _conical_rule(degree: int) -> QuadratureRule:
    # collapsed square: x = a (1 - b), y = b, dx dy = (1 - b) da db
    m = (degree + 2) // 2
    ga, wa = np.polynomial.legendre.leggauss(m)
    a = 0.5 * (ga + 1.0)
    wa = 0.5 * wa
    gb, wb = roots_jacobi(m, 1.0, 0.0)
    b = 0.5 * (gb + 1.0)
    wb = 0.25 * wb
    A, B = np.meshgrid(a, b, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    pts = np.column_stack([(A * (1.0 - B)).ravel(), B.ravel()])
    w = (WA * WB).ravel()
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, degree)


def quadrature(order: int) -> QuadratureRule:
    """Rule on the reference triangle exact for polynomials of total degree ``order``."""
    if int(order) != order or not 1 <= order <= MAX_QUADRATURE_ORDER:
        raise ElementError(f"unsupported quadrature order {order!r}; expected 1..{MAX_QUADRATURE_ORDER}")
    return _conical_rule(int(order))


def gauss_line(n: int):
    """Gauss-Legendre nodes on [0, 1] with weights summing to 1."""
    g, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (g + 1.0), 0.5 * w


# --------------------------------------------------------------------------
# Lagrange


def _as_points(point):
    p = np.asarray(point, dtype=float)
    single = p.ndim == 1
    return np.atleast_2d(p), single


def barycentric(points: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    return np.column_stack([1.0 - x - y, x, y])


def eval_lagrange(degree: int, point):
    """Values ``(Q, n)`` and reference gradients ``(Q, n, 2)`` of the P1/P2 basis.

    P2 ordering: three vertex functions, then three edge functions where edge
    function ``k`` lives on the midpoint of local edge ``k``.
    """
    pts, single = _as_points(point)
    lam = barycentric(pts)
    nq = len(pts)
    if degree == 1:
        vals = lam
        grads = np.broadcast_to(_BARY_GRADS, (nq, 3, 2)).copy()
    elif degree == 2:
        vals = np.empty((nq, 6))
        grads = np.empty((nq, 6, 2))
        for i in range(3):
            vals[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
            grads[:, i] = (4.0 * lam[:, i] - 1.0)[:, None] * _BARY_GRADS[i]
        for k, (a, b) in enumerate(LOCAL_EDGES):
            vals[:, 3 + k] = 4.0 * lam[:, a] * lam[:, b]
            grads[:, 3 + k] = 4.0 * (lam[:, a, None] * _BARY_GRADS[b] + lam[:, b, None] * _BARY_GRADS[a])
    else:
        raise ElementError(f"Lagrange degree must be 1 or 2, got {degree!r}")
    if single:
        return vals[0], grads[0]
    return vals, grads


def lagrange_nodes(degree: int) -> np.ndarray:
    if degree == 1:
        return REFERENCE_VERTICES.copy()
    if degree == 2:
        mids = 0.5 * (REFERENCE_VERTICES[LOCAL_EDGES[:, 0]] + REFERENCE_VERTICES[LOCAL_EDGES[:, 1]])
        return np.vstack([REFERENCE_VERTICES, mids])
    raise ElementError(f"Lagrange degree must be 1 or 2, got {degree!r}")


# --------------------------------------------------------------------------
# Raviart-Thomas


def _rt1_monomials(pts: np.ndarray):
    """Spanning set of RT1: P1^2 plus x * (homogeneous P1)."""
    x, y = pts[:, 0], pts[:, 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    vals = np.stack(
        [
            np.stack([one, zero], -1),
            np.stack([x, zero], -1),
            np.stack([y, zero], -1),
            np.stack([zero, one], -1),
            np.stack([zero, x], -1),
            np.stack([zero, y], -1),
            np.stack([x * x, x * y], -1),
            np.stack([x * y, y * y], -1),
        ],
        axis=1,
    )
    divs = np.stack([zero, one, zero, zero, zero, one, 3.0 * x, 3.0 * y], axis=1)
    return vals, divs


def rt_dof_functionals(degree: int, func) -> np.ndarray:
    """Apply the reference RT degrees of freedom to ``func``.

    ``func(points) -> (Q, m, 2)``; returns ``(n_dofs, m)``.  RT0 dofs are edge
    fluxes; RT1 dofs are, per edge, the flux weighted by the barycentric
    coordinate of each endpoint (start then end, counterclockwise), followed
    by the two cell moments of the x and y components.
    """
    s, w = gauss_line(4)
    rows = []
    for k, (a, b) in enumerate(LOCAL_EDGES):
        pa, pb = REFERENCE_VERTICES[a], REFERENCE_VERTICES[b]
        pts = pa + s[:, None] * (pb - pa)
        fn = np.einsum("qmc,c->qm", func(pts), _REF_EDGE_NORMALS[k])
        if degree == 0:
            rows.append(w @ fn)
        else:
            rows.append((w * (1.0 - s)) @ fn)
            rows.append((w * s) @ fn)
    if degree == 1:
        rule = quadrature(4)
        v = func(rule.points)
        rows.append(rule.weights @ v[:, :, 0])
        rows.append(rule.weights @ v[:, :, 1])
    return np.array(rows)


@lru_cache(maxsize=None)
def _rt1_coefficients() -> np.ndarray:
    D = rt_dof_functionals(1, lambda p: _rt1_monomials(p)[0])
    C = np.linalg.inv(D)
    C.setflags(write=False)
    return C


def eval_rt(degree: int, point):
    """Reference RT basis values ``(Q, n, 2)`` and divergences ``(Q, n)``."""
    pts, single = _as_points(point)
    if degree == 0:
        vals = pts[:, None, :] - REFERENCE_VERTICES[None, :, :]
        divs = np.full((len(pts), 3), 2.0)
    elif degree == 1:
        mv, md = _rt1_monomials(pts)
        C = _rt1_coefficients()
        vals = np.einsum("qjc,jm->qmc", mv, C)
        divs = md @ C
    else:
        raise ElementError(f"Raviart-Thomas degree must be 0 or 1, got {degree!r}")
    if single:
        return vals[0], divs[0]
    return vals, divs


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class GeometryMap:
    """Affine maps x = origin + J x_hat for a batch of triangles."""

    origin: np.ndarray
    jacobian: np.ndarray
    det: np.ndarray
    inv_transpose: np.ndarray

    def __len__(self):
        return len(self.det)

    def to_physical(self, ref_points: np.ndarray) -> np.ndarray:
        return self.origin[:, None, :] + np.einsum("tij,qj->tqi", self.jacobian, ref_points)


def geometry_maps(vertices: np.ndarray, triangles: np.ndarray, scale: float = 1.0) -> GeometryMap:
    p = np.asarray(vertices, dtype=float)[triangles] * scale
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 0.0):
        raise ElementError("geometry map with non-positive determinant")
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1]
    inv[:, 1, 1] = J[:, 0, 0]
    inv[:, 0, 1] = -J[:, 0, 1]
    inv[:, 1, 0] = -J[:, 1, 0]
    inv /= det[:, None, None]
    return GeometryMap(p[:, 0].copy(), J, det, np.transpose(inv, (0, 2, 1)).copy())


def piola_push(gmap: GeometryMap, ref_vals, ref_divs):
    """Contravariant Piola transform v = J v_hat / det J, div v = div v_hat / det J.

    For a single map (2x2 Jacobian) the reference arrays are transformed as
    given.  For a batch of ``T`` maps the reference arrays are shared and the
    result gains a leading triangle axis.
    """
    J = np.asarray(gmap.jacobian, dtype=float)
    det = np.asarray(gmap.det, dtype=float)
    if np.any(det <= 0.0):
        raise ElementError("Piola transform needs a positive Jacobian determinant")
    ref_vals = np.asarray(ref_vals, dtype=float)
    ref_divs = np.asarray(ref_divs, dtype=float)
    if J.ndim == 2:
        return ref_vals @ J.T / det, ref_divs / det
    vals = np.einsum("tij,...j->t...i", J, ref_vals)
    d = det.reshape((-1,) + (1,) * ref_divs.ndim)
    return vals / d[..., None], ref_divs[None] / d
