"""Degree-of-freedom maps, least-squares normal-equation assembly and SPD solvers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import elements as el
from .mesh import Mesh

log = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 40_000  # unknowns; roughly an n=64 RT0/P1 momentum system


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, iterations=None, pivot=None):
        super().__init__(message)
        self.iterations = iterations
        self.pivot = pivot


@dataclass(frozen=True)
class Space:
    family: str
    degree: int
    components: int = 1

    @property
    def name(self) -> str:
        base = "P" if self.family == el.LAGRANGE else "RT"
        return f"{base}{self.degree}" + (f"^{self.components}" if self.components > 1 else "")

    @property
    def element(self) -> el.ReferenceElement:
        return el.reference_element(self.family, self.degree)


def space(name: str, components: int = 1) -> Space:
    table = {"P1": (el.LAGRANGE, 1), "P2": (el.LAGRANGE, 2), "RT0": (el.RAVIART_THOMAS, 0), "RT1": (el.RAVIART_THOMAS, 1)}
    try:
        fam, deg = table[name.upper()]
    except KeyError:
        raise AssemblyError(f"unsupported space {name!r}") from None
    return Space(fam, deg, components)


@dataclass(frozen=True)
class DofMap:
    """Global numbering of one (possibly vector-valued) space.

    Vector spaces are numbered component-major: global index of scalar dof
    ``i`` in component ``c`` is ``c * n_scalar + i``; ``cell_dofs`` uses the
    same component-major local order.
    """

    space: Space
    n_scalar: int
    scalar_cell_dofs: np.ndarray
    scalar_cell_signs: np.ndarray
    scalar_boundary_dofs: np.ndarray

    @property
    def n_global(self) -> int:
        return self.space.components * self.n_scalar

    @property
    def n_local_scalar(self) -> int:
        return self.scalar_cell_dofs.shape[1]

    @property
    def cell_dofs(self) -> np.ndarray:
        return np.concatenate([self.scalar_cell_dofs + c * self.n_scalar for c in range(self.space.components)], axis=1)

    @property
    def cell_signs(self) -> np.ndarray:
        return np.tile(self.scalar_cell_signs, (1, self.space.components))

    @property
    def boundary_dofs(self) -> np.ndarray:
        return np.concatenate([self.scalar_boundary_dofs + c * self.n_scalar for c in range(self.space.components)])


def build_dofmap(mesh: Mesh, sp_: Space) -> DofMap:
    V, E, T = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
    tri, t2e, sgn = mesh.triangles, mesh.triangle_to_edges, mesh.edge_signs.astype(float)
    bedges = np.flatnonzero(mesh.boundary_edge_flags)
    if sp_.family == el.LAGRANGE and sp_.degree == 1:
        return DofMap(sp_, V, tri.copy(), np.ones((T, 3)), mesh.boundary_vertices)
    if sp_.family == el.LAGRANGE and sp_.degree == 2:
        dofs = np.concatenate([tri, V + t2e], axis=1)
        bnd = np.concatenate([mesh.boundary_vertices, V + bedges])
        return DofMap(sp_, V + E, dofs, np.ones((T, 6)), bnd)
    if sp_.family == el.RAVIART_THOMAS and sp_.degree == 0:
        return DofMap(sp_, E, t2e.copy(), sgn.copy(), bedges)
    if sp_.family == el.RAVIART_THOMAS and sp_.degree == 1:
        dofs = np.empty((T, 8), dtype=np.int64)
        signs = np.empty((T, 8))
        for k, (a, b) in enumerate(el.LOCAL_EDGES):
            e = t2e[:, k]
            start = mesh.edges[e, 0]
            for j, lv in enumerate((a, b)):
                w = tri[:, lv]
                dofs[:, 2 * k + j] = 2 * e + np.where(w == start, 0, 1)
                signs[:, 2 * k + j] = sgn[:, k]
        dofs[:, 6] = 2 * E + 2 * np.arange(T)
        dofs[:, 7] = dofs[:, 6] + 1
        signs[:, 6:] = 1.0
        bnd = np.sort(np.concatenate([2 * bedges, 2 * bedges + 1]))
        return DofMap(sp_, 2 * E + 2 * T, dofs, signs, bnd)
    raise AssemblyError(f"unsupported space {sp_!r}")


# --------------------------------------------------------------------------
# tabulation of physical basis functions at reference points


@dataclass(frozen=True)
class BasisTable:
    """Physical (signed, mapped) scalar basis data of one space at fixed reference points.

    Lagrange: ``values (Q, n)``, ``grads (T, Q, n, 2)``.
    Raviart-Thomas: ``values (T, Q, n, 2)``, ``divs (T, Q, n)``.
    """

    dofmap: DofMap
    values: np.ndarray
    grads: np.ndarray | None = None
    divs: np.ndarray | None = None


def tabulate(dofmap: DofMap, gmap: el.GeometryMap, ref_points: np.ndarray) -> BasisTable:
    sp_ = dofmap.space
    if sp_.family == el.LAGRANGE:
        vals, rgrads = el.eval_lagrange(sp_.degree, ref_points)
        grads = np.einsum("tij,qnj->tqni", gmap.inv_transpose, rgrads)
        return BasisTable(dofmap, vals, grads=grads)
    rv, rd = el.eval_rt(sp_.degree, ref_points)
    vals, divs = el.piola_push(gmap, rv, rd)
    s = dofmap.scalar_cell_signs[:, None, :]
    return BasisTable(dofmap, vals * s[..., None], divs=divs * s)


def evaluate(table: BasisTable, coeffs: np.ndarray):
    """Field values at the tabulation points.

    Lagrange: ``(values (T,Q,c), grads (T,Q,c,2))``; RT: ``(values (T,Q,c,2), divs (T,Q,c))``
    where ``c`` is the number of components (rows for RT).
    """
    dm = table.dofmap
    comps = dm.space.components
    local = np.asarray(coeffs)[dm.cell_dofs].reshape(len(dm.scalar_cell_dofs), comps, dm.n_local_scalar)
    if dm.space.family == el.LAGRANGE:
        vals = np.einsum("qn,tcn->tqc", table.values, local)
        grads = np.einsum("tqni,tcn->tqci", table.grads, local)
        return vals, grads
    vals = np.einsum("tqni,tcn->tqci", table.values, local)
    divs = np.einsum("tqn,tcn->tqc", table.divs, local)
    return vals, divs


def lagrange_interpolate(mesh: Mesh, dofmap: DofMap, func, scale: float = 1.0) -> np.ndarray:
    """Nodal interpolant of ``func(points (N,2)) -> (N,) or (N, c)`` on unit-square coordinates."""
    sp_ = dofmap.space
    if sp_.family != el.LAGRANGE:
        raise AssemblyError("nodal interpolation needs a Lagrange space")
    pts = mesh.vertices
    if sp_.degree == 2:
        pts = np.vstack([pts, 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])])
    vals = np.asarray(func(pts), dtype=float).reshape(len(pts), -1)
    if vals.shape[1] != sp_.components:
        raise AssemblyError(f"interpolated function has {vals.shape[1]} components, space has {sp_.components}")
    return vals.T.reshape(-1).copy()


def rt_interpolate(mesh: Mesh, dofmap: DofMap, func, scale: float = 1.0, n_edge_points: int = 4) -> np.ndarray:
    """Canonical RT interpolant of ``func(points (N,2)) -> (N, rows, 2)``.

    Edge dofs are normal moments against the global edge normal (weighted by
    the endpoint barycentric coordinates for RT1); RT1 cell dofs match the
    cell means of the field.
    """
    sp_ = dofmap.space
    if sp_.family != el.RAVIART_THOMAS:
        raise AssemblyError("RT interpolation needs a Raviart-Thomas space")
    rows = sp_.components
    E = mesh.n_edges
    s, w = el.gauss_line(n_edge_points)
    p0 = mesh.vertices[mesh.edges[:, 0]]
    p1 = mesh.vertices[mesh.edges[:, 1]]
    pts = p0[:, None, :] + s[None, :, None] * (p1 - p0)[:, None, :]
    f = np.asarray(func(pts.reshape(-1, 2)), dtype=float).reshape(E, len(s), rows, 2)
    normals = mesh.edge_normals()
    length = mesh.edge_lengths() * scale
    fn = np.einsum("eqri,ei->eqr", f, normals) * length[:, None, None]
    out = np.zeros((rows, dofmap.n_scalar))
    if sp_.degree == 0:
        out[:, :E] = np.einsum("q,eqr->re", w, fn)
    else:
        out[:, 0 : 2 * E : 2] = np.einsum("q,eqr->re", w * (1.0 - s), fn)
        out[:, 1 : 2 * E : 2] = np.einsum("q,eqr->re", w * s, fn)
        rule = el.quadrature(4)
        g = el.geometry_maps(mesh.vertices, mesh.triangles)
        qp = g.to_physical(rule.points)
        fq = np.asarray(func(qp.reshape(-1, 2)), dtype=float).reshape(mesh.n_triangles, len(rule.weights), rows, 2)
        # edge basis functions have zero cell moments, so cell dofs are J^{-1} * int_T f
        mean = np.einsum("q,tqri->tri", rule.weights, fq) * (g.det * scale**2)[:, None, None]
        Jinv = np.linalg.inv(g.jacobian * scale)
        cell = np.einsum("tij,trj->tri", Jinv, mean)
        out[:, 2 * E :: 2] = cell[:, :, 0].T
        out[:, 2 * E + 1 :: 2] = cell[:, :, 1].T
    return out.reshape(-1)


# --------------------------------------------------------------------------
# systems


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed: np.ndarray = field(default=None)
    fixed_values: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.matrix.shape[0]
        if self.fixed is None:
            self.fixed = np.zeros(n, dtype=bool)
        if self.fixed_values is None:
            self.fixed_values = np.zeros(n)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def block_offsets(dofmaps) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([d.n_global for d in dofmaps])])


def assemble_ls(dofmaps, weights: np.ndarray, rows: np.ndarray, residual: np.ndarray) -> SparseSystem:
    """Normal equations of a pointwise linearized least-squares residual.

    ``rows[t, q, m, i]`` is component ``m`` of the linear operator applied to
    local basis function ``i`` (local order = concatenation of the dofmaps'
    ``cell_dofs``) and ``residual[t, q, m]`` the current residual.  The
    result has ``A_ij = sum w L(phi_i).L(phi_j)`` and ``b_i = -sum w r.L(phi_i)``.
    """
    dofmaps = list(dofmaps)
    offs = block_offsets(dofmaps)
    local = np.concatenate([d.cell_dofs + o for d, o in zip(dofmaps, offs)], axis=1)
    n = int(offs[-1])
    T, nloc = local.shape
    if rows.ndim != 4 or rows.shape[0] != T or rows.shape[3] != nloc:
        raise AssemblyError(f"integrand rows have shape {rows.shape}, expected (T={T}, Q, m, {nloc})")
    if residual.shape != rows.shape[:3] or weights.shape != rows.shape[:2]:
        raise AssemblyError("residual/weights shapes do not match integrand rows")
    Ke = np.einsum("tq,tqmi,tqmj->tij", weights, rows, rows, optimize=True)
    be = -np.einsum("tq,tqm,tqmi->ti", weights, residual, rows, optimize=True)
    I = np.repeat(local, nloc, axis=1).ravel()
    J = np.tile(local, (1, nloc)).ravel()
    A = sp.coo_matrix((Ke.ravel(), (I, J)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    b = np.bincount(local.ravel(), weights=be.ravel(), minlength=n)
    return SparseSystem(A, b)


def ls_value(weights: np.ndarray, residual: np.ndarray) -> float:
    return float(np.einsum("tq,tqm,tqm->", weights, residual, residual))


def apply_dirichlet(system: SparseSystem, dofmap: DofMap, dofs, values, offset: int = 0) -> SparseSystem:
    """Symmetric elimination of prescribed values on boundary dofs of ``dofmap``.

    ``dofs`` are indices inside ``dofmap``; ``offset`` locates the block in
    the global system.
    """
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    if dofs.size == 0:
        return system
    allowed = np.zeros(dofmap.n_global, dtype=bool)
    allowed[dofmap.boundary_dofs] = True
    if np.any(dofs < 0) or np.any(dofs >= dofmap.n_global) or not np.all(allowed[dofs]):
        bad = dofs[(dofs < 0) | (dofs >= dofmap.n_global)]
        if bad.size == 0:
            bad = dofs[~allowed[dofs]]
        raise AssemblyError(f"cannot prescribe values on non-boundary dofs {bad[:10].tolist()}")
    g = dofs + offset
    n = system.size
    fixed = system.fixed.copy()
    fixed_values = system.fixed_values.copy()
    fixed[g] = True
    fixed_values[g] = values
    A = system.matrix.tocsr()
    xg = np.zeros(n)
    xg[g] = values
    b = system.rhs - A @ xg
    keep = sp.diags((~fixed).astype(float))
    A = (keep @ A @ keep + sp.diags(fixed.astype(float))).tocsr()
    A.eliminate_zeros()
    b[fixed] = fixed_values[fixed]
    return replace(system, matrix=A, rhs=b, fixed=fixed, fixed_values=fixed_values)


# --------------------------------------------------------------------------
# solvers


@dataclass
class SolveStats:
    method: str
    iterations: int
    relative_residual: float


def pcg(A, b, x0=None, tol: float = 1e-10, max_iter: int | None = None):
    """Conjugate gradients with Jacobi preconditioning; returns ``(x, iterations, rel_res)``."""
    n = len(b)
    if max_iter is None:
        max_iter = 10 * n
    d = A.diagonal()
    if np.any(d <= 0.0):
        i = int(np.flatnonzero(d <= 0.0)[0])
        raise SolverError(f"non-positive diagonal entry {d[i]:.3e} at row {i}", iterations=0, pivot=i)
    Minv = 1.0 / d
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    z = Minv * r
    p = z.copy()
    rz = r @ z
    for k in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise SolverError(f"CG breakdown: p^T A p = {pAp:.3e} at iteration {k}", iterations=k)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, k, rel
        z = Minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iter} iterations (relative residual {rel:.3e})", iterations=max_iter)


def solve_spd(system: SparseSystem, method: str = "auto", tol: float = 1e-10, return_stats: bool = False):
    """Solve an SPD system (after constraint elimination)."""
    A = system.matrix.tocsr()
    b = np.asarray(system.rhs, dtype=float)
    n = len(b)
    if method == "auto":
        method = "direct" if n <= DIRECT_SOLVE_LIMIT else "cg"
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        x = np.zeros(n)
        stats = SolveStats(method, 0, 0.0)
        return (x, stats) if return_stats else x
    d = A.diagonal()
    if np.any(d <= 0.0):
        i = int(np.flatnonzero(d <= 0.0)[0])
        raise SolverError(f"matrix is not positive definite: diagonal {d[i]:.3e} at row {i}", pivot=i)
    if method == "direct":
        # symmetric Jacobi scaling tames the spread of units between blocks
        s = 1.0 / np.sqrt(d)
        S = sp.diags(s)
        As = (S @ A @ S).tocsc()
        try:
            lu = spla.splu(As, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        bs = s * b
        y = lu.solve(bs)
        its = 1
        # iterative refinement in the scaled system, judged by the unscaled residual
        for _ in range(8):
            res = bs - As @ y
            if np.linalg.norm(res / s) <= 1e-12 * bnorm:
                break
            y += lu.solve(res)
            its += 1
        x = s * y
        if not np.all(np.isfinite(x)):
            raise SolverError("sparse factorization produced non-finite values")
        rel = float(np.linalg.norm(A @ x - b) / bnorm)
    elif method == "cg":
        x, its, rel = pcg(A, b, tol=tol)
    else:
        raise ValueError(f"unknown solver {method!r}")
    stats = SolveStats(method, its, rel)
    return (x, stats) if return_stats else x


# --------------------------------------------------------------------------
# shared discretization context


class FEContext:
    """Mesh geometry, quadrature and cached basis tables for one discretization.

    ``scale`` is the physical length of the unit square: geometry, derivatives
    and integrals use physical lengths while ``points`` stay in unit-square
    coordinates for evaluating the prescribed fields.
    """

    def __init__(self, mesh: Mesh, quad_order: int = 4, scale: float = 1.0):
        if scale <= 0.0:
            raise ValueError("length scale must be positive")
        self.mesh = mesh
        self.scale = float(scale)
        self.rule = el.quadrature(quad_order)
        self.gmap = el.geometry_maps(mesh.vertices, mesh.triangles, self.scale)
        self.weights = self.rule.weights[None, :] * self.gmap.det[:, None]
        unit = el.geometry_maps(mesh.vertices, mesh.triangles)
        self.points = unit.to_physical(self.rule.points)
        self._dofmaps: dict = {}
        self._tables: dict = {}

    def dofmap(self, sp_: Space) -> DofMap:
        if sp_ not in self._dofmaps:
            self._dofmaps[sp_] = build_dofmap(self.mesh, sp_)
        return self._dofmaps[sp_]

    def table(self, sp_: Space) -> BasisTable:
        if sp_ not in self._tables:
            self._tables[sp_] = tabulate(self.dofmap(sp_), self.gmap, self.rule.points)
        return self._tables[sp_]

    def integrate(self, values: np.ndarray) -> float:
        """Integral of a quantity given at the quadrature points ``(T, Q)``."""
        return float(np.einsum("tq,tq->", self.weights, values))
