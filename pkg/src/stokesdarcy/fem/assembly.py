"""Vectorized assembly of P1/P2 forms and the Stokes / Poisson systems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .constraints import ConstraintSet
from .quadrature import edge_rule, triangle_rule
from .spaces import FunctionSpace, barycentric_gradients, basis, basis_dlam, physical_points


class NullspaceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# element tabulation


def tabulate(space, lam, cells=None):
    """Values (Q,nloc) and physical gradients (M,Q,nloc,2) at barycentric points."""
    g, det = barycentric_gradients(space.mesh, cells)
    phi = basis(space.degree, lam)
    dphi = np.einsum("qak,mkd->mqad", basis_dlam(space.degree, lam), g)
    return phi, dphi, 0.5 * det


def _coo(rows, cols, vals, shape):
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)


def _cells(mesh, elements):
    if elements is None:
        return np.arange(mesh.n_triangles)
    elements = np.asarray(elements)
    return np.flatnonzero(elements) if elements.dtype == bool else elements


def _eval(f, pts, ncomp):
    """Evaluate volume data: None, constant, array per quadrature point, or callable(x, y)."""
    if f is None:
        return None
    if callable(f):
        out = np.asarray(f(pts[..., 0], pts[..., 1]), float)
        if ncomp == 2 and out.shape[0] == 2 and out.shape[1:] == pts.shape[:-1]:
            out = np.moveaxis(out, 0, -1)
    else:
        out = np.asarray(f, float)
    shape = pts.shape[:-1] + ((ncomp,) if ncomp == 2 else ())
    return np.broadcast_to(out, shape)


def stiffness(space: FunctionSpace, coef=None, elements=None, order=4):
    """∫ K ∇u·∇v for a scalar space; coef None, scalar, (2,2), or callable -> (...,2,2)."""
    mesh = space.mesh
    cells = _cells(mesh, elements)
    lam, w = triangle_rule(order)
    _, dphi, area = tabulate(space, lam, cells)
    if coef is None:
        loc = np.einsum("q,mqad,mqbd->mab", w, dphi, dphi)
    else:
        x = physical_points(mesh, lam, cells)
        if callable(coef):
            K = np.asarray(coef(x[..., 0], x[..., 1]), float)
        else:
            K = np.asarray(coef, float)
            if K.ndim == 0:
                K = K * np.eye(2)
        K = np.broadcast_to(K, x.shape[:-1] + (2, 2))
        loc = np.einsum("q,mqde,mqae,mqbd->mab", w, K, dphi, dphi)
    loc *= area[:, None, None]
    dofs = space.cell_nodes[cells]
    n = dofs.shape[1]
    return _coo(np.repeat(dofs, n, axis=1), np.tile(dofs, (1, n)), loc, (space.ndof, space.ndof))


def mass(space: FunctionSpace, coef=None, elements=None, order=4):
    mesh = space.mesh
    cells = _cells(mesh, elements)
    lam, w = triangle_rule(order)
    phi = basis(space.degree, lam)
    _, det = barycentric_gradients(mesh, cells)
    loc = np.einsum("q,qa,qb->ab", w, phi, phi)[None] * (0.5 * det)[:, None, None]
    if coef is not None:
        loc = loc * np.asarray(coef)
    dofs = space.cell_nodes[cells]
    n = dofs.shape[1]
    return _coo(np.repeat(dofs, n, axis=1), np.tile(dofs, (1, n)), loc, (space.n_nodes, space.n_nodes))


def vector_laplacian(V: FunctionSpace, elements=None):
    A = stiffness(_scalar_of(V), elements=elements)
    return sp.block_diag([A, A], format="csr")


def _scalar_of(V):
    S = object.__new__(FunctionSpace)
    S.__dict__.update(V.__dict__)
    S.kind = "scalar_quadratic"
    S.ncomp = 1
    S.ndof = V.n_nodes
    return S


def divergence(V: FunctionSpace, Q: FunctionSpace, elements=None, order=4):
    """B[k, (c, a)] = -∫ q_k ∂_c φ_a."""
    mesh = V.mesh
    cells = _cells(mesh, elements)
    lam, w = triangle_rule(order)
    _, dphi, area = tabulate(_scalar_of(V), lam, cells)
    psi = basis(Q.degree, lam)
    loc = -np.einsum("q,qk,mqad->mkda", w, psi, dphi) * area[:, None, None, None]
    qd = Q.cell_nodes[cells]
    vd = V.cell_nodes[cells]
    nq, nv = qd.shape[1], vd.shape[1]
    blocks = []
    for c in range(2):
        blocks.append(_coo(np.repeat(qd, nv, axis=1), np.tile(vd + c * V.n_nodes, (1, nq)),
                           loc[:, :, c, :], (Q.ndof, V.ndof)))
    return blocks[0] + blocks[1]


def load(space: FunctionSpace, f, elements=None, order=6):
    """∫ f·φ for scalar or vector spaces; f may be constant, callable or per-point array."""
    mesh = space.mesh
    cells = _cells(mesh, elements)
    lam, w = triangle_rule(order)
    phi = basis(space.degree, lam)
    _, det = barycentric_gradients(mesh, cells)
    x = physical_points(mesh, lam, cells)
    vals = _eval(f, x, space.ncomp)
    b = np.zeros(space.ndof)
    nodes = space.cell_nodes[cells]
    if space.ncomp == 1:
        loc = np.einsum("q,mq,qa->ma", w, vals, phi) * (0.5 * det)[:, None]
        np.add.at(b, nodes, loc)
    else:
        loc = np.einsum("q,mqc,qa->mca", w, vals, phi) * (0.5 * det)[:, None, None]
        for c in range(2):
            np.add.at(b, nodes + c * space.n_nodes, loc[:, c])
    return b


def load_gradient(space: FunctionSpace, F, elements=None, order=6):
    """∫ F : ∇φ, with F (M,Q,ncomp,2) given at the quadrature points of `order`."""
    mesh = space.mesh
    cells = _cells(mesh, elements)
    lam, w = triangle_rule(order)
    _, dphi, area = tabulate(_scalar_of(space) if space.ncomp == 2 else space, lam, cells)
    b = np.zeros(space.ndof)
    nodes = space.cell_nodes[cells]
    F = np.asarray(F)
    if space.ncomp == 1:
        loc = np.einsum("q,mqd,mqad->ma", w, F, dphi) * area[:, None]
        np.add.at(b, nodes, loc)
    else:
        loc = np.einsum("q,mqcd,mqad->mca", w, F, dphi) * area[:, None, None]
        for c in range(2):
            np.add.at(b, nodes + c * space.n_nodes, loc[:, c])
    return b


# ---------------------------------------------------------------------------
# edges


@dataclass
class EdgeSet:
    """Tagged edges with their owning triangle and local barycentric slots."""

    edges: np.ndarray  # (E,2) vertex pairs
    cells: np.ndarray  # (E,) owning triangle
    slots: np.ndarray  # (E,2) local vertex position (0..2) of each endpoint
    length: np.ndarray  # (E,)

    @classmethod
    def from_edges(cls, mesh, edges, cells_allowed=None):
        edges = np.asarray(edges, int).reshape(-1, 2)
        lookup = _edge_owner(mesh)
        cells, slots = [], []
        for a, b in edges:
            owners = lookup.get((min(a, b), max(a, b)), [])
            if cells_allowed is not None:
                owners = [o for o in owners if cells_allowed[o]]
            if not owners:
                raise ValueError(f"edge {(a, b)} has no owning triangle")
            t = owners[0]
            tri = list(mesh.triangles[t])
            cells.append(t)
            slots.append((tri.index(a), tri.index(b)))
        p = mesh.vertices[edges]
        return cls(edges, np.array(cells, int), np.array(slots, int).reshape(-1, 2),
                   np.linalg.norm(p[:, 1] - p[:, 0], axis=1))

    def barycentric(self, t):
        """(E,Q,3) barycentric coordinates of edge points at parameters t (Q,)."""
        lam = np.zeros((len(self.edges), len(t), 3))
        e = np.arange(len(self.edges))
        lam[e, :, self.slots[:, 0]] = 1 - t
        lam[e, :, self.slots[:, 1]] = t
        return lam


def _edge_owner(mesh):
    cache = mesh.__dict__.get("_edge_owner_cache")
    if cache is not None:
        return cache
    owners = {}
    for t, (a, b, c) in enumerate(mesh.triangles):
        for x, y in ((a, b), (b, c), (c, a)):
            owners.setdefault((min(x, y), max(x, y)), []).append(t)
    object.__setattr__(mesh, "_edge_owner_cache", owners)
    return owners


def edge_tabulate(space, es: EdgeSet, order=5):
    """Values (E,Q,nloc), gradients (E,Q,nloc,2), points (E,Q,2), weights*length (E,Q)."""
    t, w = edge_rule(order)
    lam = es.barycentric(t)
    phi = basis(space.degree, lam)
    g, _ = barycentric_gradients(space.mesh, es.cells)
    dphi = np.einsum("eqak,ekd->eqad", basis_dlam(space.degree, lam), g)
    v = space.mesh.vertices[es.edges]
    x = v[:, None, 0, :] * (1 - t)[None, :, None] + v[:, None, 1, :] * t[None, :, None]
    return phi, dphi, x, w[None, :] * es.length[:, None]


def edge_load(space, es: EdgeSet, g, order=5):
    """∫_edges g·φ with g constant, callable(x, y) or per-point array (E,Q[,2])."""
    phi, _, x, wl = edge_tabulate(space, es, order)
    vals = _eval(g, x, space.ncomp)
    nodes = space.cell_nodes[es.cells]
    b = np.zeros(space.ndof)
    if space.ncomp == 1:
        np.add.at(b, nodes, np.einsum("eq,eq,eqa->ea", wl, vals, phi))
    else:
        loc = np.einsum("eq,eqc,eqa->eca", wl, vals, phi)
        for c in range(2):
            np.add.at(b, nodes + c * space.n_nodes, loc[:, c])
    return b


def edge_mass(space, es: EdgeSet, coef=None, order=5):
    """∫_edges c u φ (scalar) or ∫ (C u)·φ with C (2,2) for vector spaces."""
    phi, _, x, wl = edge_tabulate(space, es, order)
    nodes = space.cell_nodes[es.cells]
    n = nodes.shape[1]
    if space.ncomp == 1:
        c = 1.0 if coef is None else coef
        loc = np.einsum("eq,eqa,eqb->eab", wl, phi, phi) * c
        return _coo(np.repeat(nodes, n, axis=1), np.tile(nodes, (1, n)), loc, (space.ndof, space.ndof))
    C = np.eye(2) if coef is None else np.asarray(coef, float)
    loc = np.einsum("eq,eqa,eqb->eab", wl, phi, phi)
    out = sp.csr_matrix((space.ndof, space.ndof))
    for i in range(2):
        for j in range(2):
            if C[i, j] != 0:
                out = out + _coo(np.repeat(nodes + i * space.n_nodes, n, axis=1),
                                 np.tile(nodes + j * space.n_nodes, (1, n)),
                                 C[i, j] * loc, (space.ndof, space.ndof))
    return out


# ---------------------------------------------------------------------------
# systems


@dataclass
class SparseSystem:
    """Full (unconstrained) operator, constraints, and the reduced saddle system."""

    A: sp.csr_matrix
    b: np.ndarray
    constraints: ConstraintSet
    partition: dict
    spaces: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self._reduced = None
        self._eliminated = None

    @property
    def ndof(self):
        return self.A.shape[0]

    def eliminate(self):
        """(A0, b0, T, g, free): constraints eliminated, no multiplier rows."""
        if self._eliminated is None:
            T, g, free = self.constraints.resolve()
            self._eliminated = ((T.T @ self.A @ T).tocsr(), T.T @ (self.b - self.A @ g), T, g, free)
        return self._eliminated

    def reduce(self):
        if self._reduced is None:
            Ar, br, T, g, _ = self.eliminate()
            rows = [c for c, _ in self.constraints.mean_zero]
            if rows:
                C = sp.csr_matrix(np.vstack([T.T @ c for c in rows]))
                cr = np.array([v - c @ g for c, v in self.constraints.mean_zero])
                k = len(rows)
                Ar = sp.bmat([[Ar, C.T], [C, sp.csr_matrix((k, k))]], format="csr")
                br = np.concatenate([br, cr])
            self._reduced = (Ar, br, T, g)
        return self._reduced

    def matrix(self):
        return self.reduce()[0]

    def rhs(self):
        return self.reduce()[1]

    def expand(self, xr):
        _, _, T, g, _ = self.eliminate()
        return T @ xr[:T.shape[1]] + g

    def pressure_modes(self):
        """Indicator vectors of pressure pieces whose constant is not fixed."""
        if "pressure" not in self.partition:
            return []
        T, _, _ = self.constraints.resolve()
        sl = self.partition["pressure"]
        vel = self.partition["velocity"]
        B = self.A[sl, vel]
        Tv = T[vel][:, :]
        Q = self.spaces.get("pressure")
        comps = _pressure_components(Q) if Q is not None else [np.ones(sl.stop - sl.start, bool)]
        comps = comps + [np.ones(sl.stop - sl.start, bool)] if len(comps) > 1 else comps
        bad = []
        scale = abs(B).max() if B.nnz else 1.0
        for comp in comps:
            q = comp.astype(float)
            r = (q @ B) @ Tv
            if np.abs(r).max(initial=0) <= 1e-10 * scale:
                bad.append(comp)
        return bad


def _pressure_components(Q):
    """Connected vertex components of the pressure mesh (P1 dofs)."""
    from scipy.sparse.csgraph import connected_components

    t = Q.mesh.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    G = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(Q.ndof, Q.ndof))
    n, lab = connected_components(G, directed=False)
    return [lab == k for k in range(n)]


def pressure_mean_vector(Q: FunctionSpace, elements=None):
    """Vector m with m·p = ∫ p over the selected triangles."""
    return load(Q, 1.0, elements=elements, order=2)


def assemble_stokes(mesh, V, Q, volume_force=None, interface_tractions=None, robin_terms=None,
                    constraints: ConstraintSet | None = None, mean_zero=None, div_data=None,
                    check_nullspace=True):
    """Taylor-Hood system for ∫∇v:∇φ − ∫p∇·φ − ∫q∇·v = ∫f·φ + Σ∫g·φ (+ Robin).

    interface_tractions: {tag or EdgeSet: g} edge loads; robin_terms: {tag or
    EdgeSet: C} adds ∫(C v)·φ.  div_data adds −∫ q r on the right so that
    ∇·v = r weakly.  mean_zero: None, True (whole mesh) or an element mask.
    """
    n_v, n_q = V.ndof, Q.ndof
    A = vector_laplacian(V)
    B = divergence(V, Q)
    K = sp.bmat([[A, B.T], [B, None]], format="csr")
    b = np.zeros(n_v + n_q)
    if volume_force is not None:
        b[:n_v] += volume_force if isinstance(volume_force, np.ndarray) and volume_force.shape == (n_v,) \
            else load(V, volume_force)
    for key, g in (interface_tractions or {}).items():
        es = key if isinstance(key, EdgeSet) else EdgeSet.from_edges(mesh, mesh.tagged(key))
        b[:n_v] += edge_load(V, es, g)
    robin = sp.csr_matrix((n_v, n_v))
    for key, C in (robin_terms or {}).items():
        es = key if isinstance(key, EdgeSet) else EdgeSet.from_edges(mesh, mesh.tagged(key))
        robin = robin + edge_mass(V, es, C)
    if robin.nnz:
        K = K + sp.block_diag([robin, sp.csr_matrix((n_q, n_q))], format="csr")
    if div_data is not None:
        b[n_v:] += -(div_data if isinstance(div_data, np.ndarray) and div_data.shape == (n_q,)
                     else load(Q, div_data))
    cs = constraints or ConstraintSet(n_v + n_q)
    if cs.ndof != n_v + n_q:
        raise ValueError("constraint set size does not match the Stokes system")
    if mean_zero is not None and mean_zero is not False:
        vec = np.zeros(n_v + n_q)
        vec[n_v:] = pressure_mean_vector(Q, None if mean_zero is True else mean_zero)
        mode = np.zeros(n_v + n_q)
        mode[n_v:] = 1.0
        cs.add_mean_zero(vec, mode=mode)
    system = SparseSystem(K, b, cs, {"velocity": slice(0, n_v), "pressure": slice(n_v, n_v + n_q)},
                          {"velocity": V, "pressure": Q})
    if check_nullspace and not cs.mean_zero and system.pressure_modes():
        raise NullspaceError("pressure constant is not fixed: no open boundary and no mean-zero "
                             "constraint")
    return system


def assemble_poisson(mesh, space, diffusion_tensor=None, neumann_data=None, dirichlet_data=None,
                     source=None, constraints: ConstraintSet | None = None, gauge=False):
    """System for ∫K∇p·∇q = ∫f q + Σ_Neumann ∫g q with Dirichlet data eliminated."""
    A = stiffness(space, diffusion_tensor)
    b = np.zeros(space.ndof)
    if source is not None:
        b += load(space, source)
    for tag, g in (neumann_data or {}).items():
        es = tag if isinstance(tag, EdgeSet) else EdgeSet.from_edges(mesh, mesh.tagged(tag))
        b += edge_load(space, es, g)
    cs = constraints or ConstraintSet(space.ndof)
    for tag, val in (dirichlet_data or {}).items():
        nodes = space.boundary_nodes(tag)
        v = val(*space.node_coords[nodes].T) if callable(val) else val
        cs.dirichlet(nodes, v)
    if gauge:
        cs.add_mean_zero(load(space, 1.0, order=4), mode=np.ones(space.ndof))
    system = SparseSystem(A, b, cs, {"scalar": slice(0, space.ndof)}, {"scalar": space})
    if not cs.mean_zero and not cs._value:
        raise NullspaceError("pure Neumann problem without gauge fixing")
    return system
