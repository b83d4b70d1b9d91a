"""Finite element fields, point location, line profiles and edge integrals."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..mesh import FREE, POROUS
from .spaces import barycentric_gradients, basis, basis_dlam

log = logging.getLogger(__name__)


class Field:
    def __init__(self, space, values, name=""):
        values = np.asarray(values, float)
        if values.shape != (space.ndof,):
            raise ValueError(f"field needs {space.ndof} coefficients, got {values.shape}")
        self.space = space
        self.values = values
        self.name = name

    @property
    def mesh(self):
        return self.space.mesh

    def components(self):
        n = self.space.n_nodes
        return [self.values[c * n:(c + 1) * n] for c in range(self.space.ncomp)]

    def cell_values(self, cells, lam):
        """Values at barycentric points lam (P,3) inside cells (P,) -> (P,) or (P,2)."""
        phi = basis(self.space.degree, lam)
        nodes = self.space.cell_nodes[cells]
        out = [np.einsum("pa,pa->p", phi, c[nodes]) for c in self.components()]
        return out[0] if len(out) == 1 else np.column_stack(out)

    def cell_gradients(self, cells, lam):
        """Gradients at points: (P,2) scalar or (P,2,2) vector with [i, j] = ∂u_i/∂x_j."""
        g, _ = barycentric_gradients(self.mesh, cells)
        dphi = np.einsum("pak,pkd->pad", basis_dlam(self.space.degree, lam), g)
        nodes = self.space.cell_nodes[cells]
        out = [np.einsum("pad,pa->pd", dphi, c[nodes]) for c in self.components()]
        return out[0] if len(out) == 1 else np.stack(out, axis=1)

    def __call__(self, points):
        loc = locator(self.mesh)
        cells, lam = loc.locate(points)
        if (cells < 0).any():
            raise ValueError("points outside the mesh")
        return self.cell_values(cells, lam)


# ---------------------------------------------------------------------------
# point location


class Locator:
    def __init__(self, mesh):
        self.mesh = mesh
        v, t = mesh.vertices, mesh.triangles
        self.centroids = v[t].mean(axis=1)
        self.tree = cKDTree(self.centroids)
        g, det = barycentric_gradients(mesh)
        self._g = g
        self._p0 = v[t]
        edges, t2e = mesh.edges()
        owner = -np.ones((len(edges), 2), int)
        for k in range(3):
            for tri, e in enumerate(t2e[:, k]):
                owner[e, 0 if owner[e, 0] < 0 else 1] = tri
        # neighbor opposite local vertex i is across local edge (i+1, i+2) = t2e[:, (i+1)%3]
        self.neighbors = -np.ones((len(t), 3), int)
        for i in range(3):
            e = t2e[:, (i + 1) % 3]
            o = owner[e]
            self.neighbors[:, i] = np.where(o[:, 0] == np.arange(len(t)), o[:, 1], o[:, 0])

    def barycentric(self, cells, pts):
        d = pts - self._p0[cells, 0]
        l1 = np.einsum("pd,pd->p", self._g[cells, 1], d)
        l2 = np.einsum("pd,pd->p", self._g[cells, 2], d)
        return np.column_stack([1 - l1 - l2, l1, l2])

    def locate(self, points, tol=1e-10):
        """Walk from the nearest centroid; returns cells (-1 if not found) and barycentrics."""
        pts = np.atleast_2d(np.asarray(points, float))
        _, start = self.tree.query(pts)
        cells = np.asarray(start, int).copy()
        lam = np.zeros((len(pts), 3))
        for p in range(len(pts)):
            c = cells[p]
            found = False
            for _ in range(200):
                l = self.barycentric(np.array([c]), pts[p:p + 1])[0]
                k = int(l.argmin())
                if l[k] >= -tol:
                    found = True
                    break
                nxt = self.neighbors[c, k]
                if nxt < 0:
                    break
                c = nxt
            if not found:
                _, cand = self.tree.query(pts[p], k=min(32, len(self.centroids)))
                ls = self.barycentric(np.atleast_1d(cand), np.repeat(pts[p:p + 1], np.size(cand), 0))
                ok = np.flatnonzero(ls.min(axis=1) >= -tol)
                if len(ok):
                    c, l, found = np.atleast_1d(cand)[ok[0]], ls[ok[0]], True
            if not found:
                all_l = self.barycentric(np.arange(len(self.centroids)),
                                         np.repeat(pts[p:p + 1], len(self.centroids), 0))
                ok = np.flatnonzero(all_l.min(axis=1) >= -tol)
                if len(ok):
                    c, l, found = ok[0], all_l[ok[0]], True
            cells[p] = c if found else -1
            lam[p] = np.clip(l, 0.0, 1.0) if found else 0.0
            if found:
                lam[p] /= lam[p].sum()
        return cells, lam


def locator(mesh):
    loc = mesh.__dict__.get("_locator")
    if loc is None:
        loc = Locator(mesh)
        object.__setattr__(mesh, "_locator", loc)
    return loc


def in_obstacle(mesh, pts, tol=1e-9):
    c = mesh.circles
    if not len(c):
        return np.zeros(len(pts), bool)
    d = np.linalg.norm(pts[:, None, :] - c[None, :, :2], axis=2) - c[None, :, 2]
    return (d < tol).any(axis=1)


# ---------------------------------------------------------------------------
# profiles


@dataclass
class Profile:
    start: np.ndarray
    end: np.ndarray
    s: np.ndarray
    points: np.ndarray
    values: np.ndarray  # (n,) or (n,2); NaN where masked
    mask: np.ndarray  # True where the sample is valid

    @property
    def n(self):
        return len(self.s)


def line_points(segment, n):
    a, b = (np.asarray(p, float) for p in segment)
    s = np.linspace(0.0, 1.0, n)
    pts = a + s[:, None] * (b - a)
    for k in (0, 1):
        if a[k] == b[k]:
            pts[:, k] = a[k]
    return s * np.linalg.norm(b - a), pts


def evaluate_along_line(field, segment, n=400, cells=None):
    """n equispaced samples along segment; samples inside obstacles are masked.

    `cells` may restrict the search to a triangle subset (mask) to select one
    side of a double-valued field; points outside it count as outside.
    """
    s, pts = line_points(segment, n)
    loc = locator(field.mesh)
    c, lam = loc.locate(pts)
    if cells is not None:
        bad = (c >= 0) & ~np.asarray(cells)[np.maximum(c, 0)]
        if bad.any():
            raise ValueError("samples fall outside the selected triangles")
    missing = c < 0
    obst = in_obstacle(field.mesh, pts)
    if (missing & ~obst).any():
        raise ValueError(f"{int((missing & ~obst).sum())} samples lie outside the mesh")
    valid = ~missing & ~obst
    shape = (n,) if field.space.ncomp == 1 else (n, 2)
    vals = np.full(shape, np.nan)
    if valid.any():
        vals[valid] = field.cell_values(c[valid], lam[valid])
    return Profile(np.asarray(segment[0], float), np.asarray(segment[1], float), s, pts, vals, valid)


def write_profile_csv(path, s, points, v, p=None):
    """Columns s, x1, x2, v1, v2[, p]; masked values written as nan."""
    cols = ["s", "x1", "x2", "v1", "v2"] + (["p"] if p is not None else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for i in range(len(s)):
            row = [s[i], points[i, 0], points[i, 1], v[i, 0], v[i, 1]]
            if p is not None:
                row.append(p[i])
            w.writerow([repr(float(x)) for x in row])


def read_profile_csv(path):
    with open(path) as f:
        r = csv.reader(f)
        header = next(r)
        data = np.array([[float(x) for x in row] for row in r])
    return {name: data[:, k] for k, name in enumerate(header)}


# ---------------------------------------------------------------------------
# edge integrals


def side_cells(mesh, side):
    """Triangle mask for side '+' (free part) or '-' (porous part)."""
    return mesh.regions == (FREE if side == "+" else POROUS)


def integrate_edge(field, tag, side=None, component=None, func=None, order=5):
    """Gauss quadrature of a field trace over the edges carrying `tag`.

    side '+' / '-' picks the trace on a double-valued edge (free / porous
    triangles); func(values, gradients, points) may replace the plain trace.
    """
    from .assembly import EdgeSet, edge_tabulate

    mesh = field.mesh
    edges = mesh.tagged(tag)
    if not len(edges):
        raise KeyError(f"no edges tagged {tag!r}")
    allowed = None
    if side is not None:
        allowed = side_cells(mesh, side)
        lookup_sides = _edge_sides(mesh, edges)
        if lookup_sides.all():
            edges = edges[np.array([allowed[c] for c in _owner_cells(mesh, edges)])]
        else:
            warnings.warn(f"edge tag {tag!r} is single-valued; side ignored", stacklevel=2)
            allowed = None
    es = EdgeSet.from_edges(mesh, edges, allowed)
    phi, dphi, x, wl = edge_tabulate(field.space, es, order)
    nodes = field.space.cell_nodes[es.cells]
    vals = np.stack([np.einsum("eqa,ea->eq", phi, c[nodes]) for c in field.components()], -1)
    if func is not None:
        grads = np.stack([np.einsum("eqad,ea->eqd", dphi, c[nodes]) for c in field.components()], -2)
        integrand = func(vals, grads, x)
    elif component is not None:
        integrand = vals[..., component]
    elif vals.shape[-1] == 1:
        integrand = vals[..., 0]
    else:
        return np.einsum("eq,eqc->c", wl, vals)
    return float(np.einsum("eq,eq->", wl, integrand))


def _owner_cells(mesh, edges):
    from .assembly import _edge_owner

    own = _edge_owner(mesh)
    return [own[(min(a, b), max(a, b))][0] for a, b in edges]


def _edge_sides(mesh, edges):
    """True where the tagged edges have both a plus and a minus copy (S in a stripe)."""
    r = mesh.regions[_owner_cells(mesh, edges)]
    return np.array([(r == FREE).any() and (r == POROUS).any()] * len(edges))
