"""Structured triangulations of the unit square with edge orientation data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Conforming triangle mesh.

    ``triangle_to_edges[t, k]`` is the global edge opposite local vertex ``k``
    of triangle ``t`` and ``edge_signs[t, k]`` is +1 when the counterclockwise
    traversal of that edge agrees with the global orientation (low vertex
    index to high vertex index), -1 otherwise.  The global edge normal is the
    global tangent rotated clockwise, so it coincides with the outward normal
    of the triangle exactly where the sign is +1.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    boundary_edge_flags: np.ndarray
    triangle_to_edges: np.ndarray
    edge_signs: np.ndarray
    edge_triangles: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.edges[self.boundary_edge_flags])

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def edge_normals(self) -> np.ndarray:
        """Unit normals of the global edge orientation."""
        t = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        n = np.column_stack([t[:, 1], -t[:, 0]])
        return n / np.linalg.norm(n, axis=1)[:, None]

    def edge_lengths(self) -> np.ndarray:
        t = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(t, axis=1)

    def validate(self) -> None:
        """Raise :class:`MeshError` if any structural invariant is broken."""
        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            bad = np.flatnonzero(areas <= 0.0)
            raise MeshError(f"non-positive triangle area in triangles {bad.tolist()}")
        counts = np.bincount(self.triangle_to_edges.ravel(), minlength=self.n_edges)
        expected = np.where(self.boundary_edge_flags, 1, 2)
        if np.any(counts != expected):
            raise MeshError("edge/triangle incidence is not conforming")
        sign_sum = np.zeros(self.n_edges)
        np.add.at(sign_sum, self.triangle_to_edges.ravel(), self.edge_signs.ravel())
        if np.any(sign_sum[~self.boundary_edge_flags] != 0):
            raise MeshError("interior edge seen with equal orientation from both sides")


def _connectivity(vertices: np.ndarray, triangles: np.ndarray) -> Mesh:
    local = np.array([[1, 2], [2, 0], [0, 1]])
    ccw = triangles[:, local]  # (T, 3, 2) edge k runs v[k+1] -> v[k+2]
    lo = ccw.min(axis=2)
    hi = ccw.max(axis=2)
    key = np.stack([lo.ravel(), hi.ravel()], axis=1)
    edges, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    tri_to_edge = inverse.reshape(-1, 3)
    signs = np.where(ccw[:, :, 0] < ccw[:, :, 1], 1, -1).astype(np.int8)

    counts = np.bincount(inverse, minlength=len(edges))
    boundary = counts == 1

    edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    owner = order // 3
    first = np.searchsorted(inverse[order], np.arange(len(edges)))
    edge_triangles[:, 0] = owner[first]
    second = first + 1
    has_two = ~boundary
    edge_triangles[has_two, 1] = owner[second[has_two]]

    return Mesh(
        vertices=vertices,
        triangles=triangles,
        edges=edges.astype(np.int64),
        boundary_edge_flags=boundary,
        triangle_to_edges=tri_to_edge.astype(np.int64),
        edge_signs=signs,
        edge_triangles=edge_triangles,
    )


def from_arrays(vertices, triangles, validate: bool = True) -> Mesh:
    """Build a mesh from raw arrays (counterclockwise triangles expected)."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    m = _connectivity(vertices, triangles)
    if validate:
        m.validate()
    return m


def build_structured(n: int) -> Mesh:
    """Uniform ``n x n`` grid on the unit square, each cell cut lower-left to upper-right."""
    if int(n) != n or n < 1:
        raise MeshError(f"mesh resolution must be a positive integer, got {n!r}")
    n = int(n)
    s = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(s, s, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return from_arrays(vertices, triangles)


@dataclass(frozen=True)
class QualityReport:
    min_angle_deg: float
    max_aspect_ratio: float
    min_area: float
    valid: bool
    message: str = ""


def mesh_quality(m: Mesh) -> QualityReport:
    p = m.vertices[m.triangles]
    areas = m.signed_areas()
    angles = []
    lengths = []
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ij,ij->i", a, b) / np.maximum(
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), np.finfo(float).tiny
        )
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        lengths.append(np.linalg.norm(a, axis=1))
    angles = np.array(angles)
    lengths = np.array(lengths)
    # aspect ratio: longest edge over the altitude onto it
    longest = lengths.max(axis=0)
    with np.errstate(divide="ignore"):
        aspect = np.where(areas > 0, longest**2 / (2.0 * np.abs(areas)), np.inf)
    try:
        m.validate()
        valid, message = True, ""
    except MeshError as exc:
        valid, message = False, str(exc)
    return QualityReport(
        min_angle_deg=float(angles.min()),
        max_aspect_ratio=float(aspect.max()),
        min_area=float(areas.min()),
        valid=valid,
        message=message,
    )
