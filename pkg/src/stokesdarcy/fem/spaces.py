"""Lagrange spaces on triangle meshes: P1 scalar, P2 scalar, P2 vector.

Quadratic node numbering puts the mesh vertices first and the edge midpoints
after them (edge order of ``TriMesh.edges``).  Vector unknowns are blocked by
component: dof ``c * n_nodes + node``.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

KINDS = ("scalar_linear", "scalar_quadratic", "vector_quadratic")


class FunctionSpace:
    def __init__(self, mesh, kind):
        if kind not in KINDS:
            raise ValueError(f"unknown space kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        self.degree = 1 if kind == "scalar_linear" else 2
        self.ncomp = 2 if kind == "vector_quadratic" else 1
        edges, t2e = mesh.edges()
        self._edges = edges
        nv = mesh.n_vertices
        if self.degree == 1:
            self.cell_nodes = np.asarray(mesh.triangles)
            self.n_nodes = nv
        else:
            self.cell_nodes = np.hstack([mesh.triangles, nv + t2e])
            self.n_nodes = nv + len(edges)
        self.ndof = self.ncomp * self.n_nodes

    def __repr__(self):
        return f"FunctionSpace({self.kind}, ndof={self.ndof})"

    @cached_property
    def node_coords(self):
        v = self.mesh.vertices
        if self.degree == 1:
            return v.copy()
        mid = 0.5 * (v[self._edges[:, 0]] + v[self._edges[:, 1]])
        for k in (0, 1):
            same = v[self._edges[:, 0], k] == v[self._edges[:, 1], k]
            mid[same, k] = v[self._edges[same, 0], k]
        return np.vstack([v, mid])

    @cached_property
    def _edge_index(self):
        return {tuple(e): i for i, e in enumerate(self._edges)}

    def edge_midpoint(self, a, b):
        """Node index of the midpoint of mesh edge (a, b)."""
        return self.mesh.n_vertices + self._edge_index[(min(a, b), max(a, b))]

    def dofs(self, nodes, comp=None):
        nodes = np.asarray(nodes, int)
        if self.ncomp == 1:
            return nodes
        comps = range(self.ncomp) if comp is None else [comp]
        return np.concatenate([c * self.n_nodes + nodes for c in comps])

    def cell_dofs(self):
        """(M, ncomp*nloc) global dofs per triangle, component-blocked."""
        if self.ncomp == 1:
            return self.cell_nodes
        return np.hstack([c * self.n_nodes + self.cell_nodes for c in range(self.ncomp)])

    def edge_nodes(self, edges):
        """All nodes (vertices and, for P2, midpoints) on the given edges."""
        edges = np.asarray(edges, int).reshape(-1, 2)
        nodes = [edges.ravel()]
        if self.degree == 2:
            nodes.append(np.array([self.edge_midpoint(a, b) for a, b in edges], int))
        return np.unique(np.concatenate(nodes)) if len(edges) else np.zeros(0, int)

    def boundary_nodes(self, *tags):
        return self.edge_nodes(np.vstack([self.mesh.tagged(t) for t in tags]) if tags
                               else np.zeros((0, 2), int))

    def node_pairs(self, vertex_pairs):
        """Extend vertex pairs (a, a') to node pairs including edge midpoints."""
        vertex_pairs = np.asarray(vertex_pairs, int).reshape(-1, 2)
        if self.degree == 1 or not len(vertex_pairs):
            return vertex_pairs
        table = dict(map(tuple, vertex_pairs))
        mids = []
        for a, b in self._edges:
            if a in table and b in table:
                key = (min(table[a], table[b]), max(table[a], table[b]))
                if key in self._edge_index and key != (a, b):
                    mids.append((self.edge_midpoint(a, b),
                                 self.mesh.n_vertices + self._edge_index[key]))
        if not mids:
            return vertex_pairs
        return np.vstack([vertex_pairs, np.array(mids, int)])


def P1(mesh):
    return FunctionSpace(mesh, "scalar_linear")


def P2(mesh):
    return FunctionSpace(mesh, "scalar_quadratic")


def P2vec(mesh):
    return FunctionSpace(mesh, "vector_quadratic")


# ---------------------------------------------------------------------------
# reference basis in barycentric coordinates; P2 local order v0 v1 v2 e01 e12 e20


def basis(degree, lam):
    """Basis values at barycentric points lam (..., 3) -> (..., nloc)."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    if degree == 1:
        return np.stack([l0, l1, l2], axis=-1)
    return np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=-1)


def basis_dlam(degree, lam):
    """Derivatives w.r.t. the three barycentrics: (..., nloc, 3)."""
    shape = lam.shape[:-1]
    if degree == 1:
        return np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    z = np.zeros(shape)
    rows = [
        (4 * l0 - 1, z, z),
        (z, 4 * l1 - 1, z),
        (z, z, 4 * l2 - 1),
        (4 * l1, 4 * l0, z),
        (z, 4 * l2, 4 * l1),
        (4 * l2, z, 4 * l0),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def barycentric_gradients(mesh, cells=None):
    """Constant gradients of the barycentrics per triangle: (M, 3, 2), and 2*area."""
    t = mesh.triangles if cells is None else mesh.triangles[cells]
    p = mesh.vertices[t]
    x, y = p[..., 0], p[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    g = np.empty((len(t), 3, 2))
    g[:, 0, 0] = y[:, 1] - y[:, 2]
    g[:, 0, 1] = x[:, 2] - x[:, 1]
    g[:, 1, 0] = y[:, 2] - y[:, 0]
    g[:, 1, 1] = x[:, 0] - x[:, 2]
    g[:, 2, 0] = y[:, 0] - y[:, 1]
    g[:, 2, 1] = x[:, 1] - x[:, 0]
    return g / det[:, None, None], det


def physical_points(mesh, lam, cells=None):
    """Map barycentric points (Q,3) to coordinates (M,Q,2)."""
    t = mesh.triangles if cells is None else mesh.triangles[cells]
    p = mesh.vertices[t]
    return np.einsum("qk,mkd->mqd", lam, p)
