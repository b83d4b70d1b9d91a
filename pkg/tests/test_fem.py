import warnings

import numpy as np
import pytest
import scipy.sparse as sp
import sympy as sym
from hypothesis import given, settings, strategies as st

from stokesdarcy import mms
from stokesdarcy.fem import (P1, P2, ConstraintError, ConstraintSet, Field, NullspaceError, P2vec,
                             SingularSystemError, SparseSystem, assemble_poisson, assemble_stokes,
                             evaluate_along_line, integrate_edge, solve)
from stokesdarcy.mesh import build_perforated_domain, build_rectangle, build_stripe

SIDES = ("bottom", "right", "top", "left")


def unit_square(h=0.125, structured=True):
    return build_rectangle((0.0, 1.0, 0.0, 1.0), h, structured)


def cavity(mesh, lid=1.0):
    V, Q = P2vec(mesh), P1(mesh)
    n = V.n_nodes
    x = V.node_coords
    top = V.boundary_nodes("top")
    lid_nodes = top[(x[top, 0] > 1e-12) & (x[top, 0] < 1 - 1e-12)]
    walls = np.setdiff1d(V.boundary_nodes(*SIDES), lid_nodes)
    cs = ConstraintSet(V.ndof + Q.ndof)
    cs.dirichlet(np.concatenate([walls, walls + n, lid_nodes + n]), 0.0)
    cs.dirichlet(lid_nodes, lid)
    return assemble_stokes(mesh, V, Q, constraints=cs, mean_zero=True)


def test_space_dof_counts():
    m = unit_square(0.25)
    ne = len(m.edges()[0])
    assert P1(m).ndof == m.n_vertices
    assert P2(m).ndof == m.n_vertices + ne
    assert P2vec(m).ndof == 2 * (m.n_vertices + ne)
    with pytest.raises(ValueError):
        Field(P1(m), np.zeros(3))


def test_forcing_matches_symbolic_derivation():
    x, y = sym.symbols("x y")
    psi = sym.sin(sym.pi * x) * sym.sin(sym.pi * y)
    v = sym.Matrix([sym.diff(psi, y), -sym.diff(psi, x)])
    p = sym.cos(sym.pi * x) * sym.cos(sym.pi * y)
    f = [-(sym.diff(v[i], x, 2) + sym.diff(v[i], y, 2)) + sym.diff(p, s) for i, s in enumerate((x, y))]
    assert sym.simplify(sym.diff(v[0], x) + sym.diff(v[1], y)) == 0
    assert sym.integrate(p, (x, 0, 1), (y, 0, 1)) == 0
    pts = np.random.default_rng(0).random((20, 2))
    fn = sym.lambdify((x, y), f, "numpy")
    vn = sym.lambdify((x, y), list(v), "numpy")
    gn = sym.lambdify((x, y), [[sym.diff(v[i], s) for s in (x, y)] for i in range(2)], "numpy")
    ref_f = np.array(fn(pts[:, 0], pts[:, 1])).T
    assert np.allclose(mms.stokes_forcing(pts[:, 0], pts[:, 1]), ref_f, atol=1e-12)
    assert np.allclose(mms.stokes_exact(pts[:, 0], pts[:, 1])[0], np.array(vn(*pts.T)).T, atol=1e-12)
    g = np.moveaxis(np.array(gn(*pts.T), dtype=float), -1, 0)
    assert np.allclose(mms.stokes_velocity_gradient(*pts.T), g, atol=1e-12)
    q = sym.cos(sym.pi * x) * sym.cosh(sym.pi * y)
    assert sym.simplify(sym.diff(q, x, 2) + sym.diff(q, y, 2)) == 0


def test_stokes_mms_orders():
    hs = [1 / 8, 1 / 16, 1 / 32, 1 / 64]
    r = [mms.stokes_errors(h) for h in hs]
    ov = mms.observed_orders(hs, [e["velocity_l2"] for e in r])
    o1 = mms.observed_orders(hs, [e["velocity_h1"] for e in r])
    op = mms.observed_orders(hs, [e["pressure_l2"] for e in r])
    od = mms.observed_orders(hs, [e["divergence_l2"] for e in r])
    assert np.all(np.abs(ov - 3.0) <= 0.2), ov
    assert np.all(np.abs(o1 - 2.0) <= 0.2), o1
    assert np.all(np.abs(op - 2.0) <= 0.3), op
    assert np.all(od >= 1.8), od
    assert max(e["residual"] for e in r) <= 1e-10


def test_stokes_mms_unstructured():
    hs = [0.1, 0.05]
    r = [mms.stokes_errors(h, structured=False) for h in hs]
    ratio = r[0]["velocity_l2"] / r[1]["velocity_l2"]
    assert ratio > 2 ** 2.7


@pytest.mark.parametrize("degree,order", [(1, 2.0), (2, 3.0)])
def test_darcy_mms_orders(degree, order):
    hs = [1 / 8, 1 / 16, 1 / 32, 1 / 64]
    r = [mms.darcy_errors(h, degree) for h in hs]
    o = mms.observed_orders(hs, [e["l2"] for e in r])
    assert np.all(np.abs(o - order) <= 0.2), o


def test_cavity_solvable_and_residual():
    sol = solve(cavity(unit_square(0.1)))
    assert sol.residual <= 1e-10
    v = sol["velocity"]
    assert np.isfinite(v.values).all()
    # the lid drags fluid in +x1 near the top
    assert v(np.array([[0.5, 0.95]]))[0, 0] > 0.2


def test_zero_data_gives_zero_solution():
    m = unit_square(0.25)
    V, Q = P2vec(m), P1(m)
    cs = ConstraintSet(V.ndof + Q.ndof)
    cs.dirichlet(V.dofs(V.boundary_nodes(*SIDES)), 0.0)
    sol = solve(assemble_stokes(m, V, Q, constraints=cs, mean_zero=True))
    assert np.abs(sol.x).max() == 0.0
    D = P1(m)
    s2 = solve(assemble_poisson(m, D, dirichlet_data={"bottom": 0.0}))
    assert np.abs(s2.x).max() == 0.0


def test_pressure_nullspace_rejected():
    m = unit_square(0.25)
    V, Q = P2vec(m), P1(m)
    cs = ConstraintSet(V.ndof + Q.ndof)
    cs.dirichlet(V.dofs(V.boundary_nodes(*SIDES)), 0.0)
    with pytest.raises(NullspaceError):
        assemble_stokes(m, V, Q, constraints=cs)


def test_poisson_all_neumann_rejected_and_singular_diagnostic():
    m = unit_square(0.25)
    P = P1(m)
    with pytest.raises(NullspaceError):
        assemble_poisson(m, P, neumann_data={"top": 1.0})
    from stokesdarcy.fem.assembly import stiffness

    s = SparseSystem(stiffness(P), np.ones(P.ndof), ConstraintSet(P.ndof), {"scalar": slice(0, P.ndof)},
                     {"scalar": P})
    with pytest.raises(SingularSystemError, match="constant mode"):
        solve(s)


def test_gauged_neumann_poisson():
    m = unit_square(0.125)
    P = P2(m)
    # -lap p = 0 with flux +1 in at the bottom and out at the top
    s = assemble_poisson(m, P, neumann_data={"top": 1.0, "bottom": -1.0}, gauge=True)
    sol = solve(s)
    u = sol["scalar"]
    pts = np.array([[0.3, 0.2], [0.7, 0.9]])
    assert np.allclose(u(pts), pts[:, 1] - 0.5, atol=1e-12)


@pytest.mark.parametrize("k", [0, 2, 4])
def test_darcy_linear_pressure_exact(k):
    m = build_rectangle((0.0, 1.0, -0.5, 0.0), 0.1, structured=False)
    eps = 0.05
    P = P1(m)
    K = eps ** k * np.eye(2)
    # K dp/dy = 1 at the top (outward flux of -K grad p equals -1), p = 0 at the bottom
    sol = solve(assemble_poisson(m, P, K, neumann_data={"top": 1.0}, dirichlet_data={"bottom": 0.0}))
    x = P.node_coords
    assert np.abs(sol.x - (x[:, 1] + 0.5) / eps ** k).max() <= 1e-10 * max(1.0, 0.5 / eps ** k)


def test_identity_system():
    n = 7
    b = np.arange(n, dtype=float)
    s = SparseSystem(sp.identity(n, format="csr"), b, ConstraintSet(n), {"x": slice(0, n)}, {})
    sol = solve(s)
    assert np.array_equal(sol.x, b)


def test_cavity_refinement_agreement():
    sols = [solve(cavity(unit_square(h))) for h in (1 / 8, 1 / 16, 1 / 32)]
    v = sols[0]["velocity"].mesh.vertices
    inner = (v[:, 1] < 0.8) & (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0)
    a, b, c = (s["velocity"](v[inner]) for s in sols)
    # coarse nodes away from the lid corners: differences shrink under refinement
    assert np.abs(a - b).max() < 0.03
    assert np.abs(b - c).max() < 0.5 * np.abs(a - b).max()


def test_poisson_reflection_symmetry():
    from stokesdarcy.mesh import TriMesh

    m = unit_square(0.1, structured=False)
    f = lambda x, y: np.cos(np.pi * (x - 0.5)) * (1 + y)
    bc = {s: 0.0 for s in SIDES}
    u = solve(assemble_poisson(m, P2(m), source=f, dirichlet_data=bc))["scalar"]
    # the mirrored mesh carries the mirrored discrete problem
    mv = m.vertices.copy()
    mv[:, 0] = 1 - mv[:, 0]
    swap = {"left": "right", "right": "left"}
    mirror = TriMesh(mv, m.triangles[:, ::-1].copy(),
                     {swap.get(k, k): e[:, ::-1].copy() for k, e in m.edge_tags.items()}).validate()
    um = solve(assemble_poisson(mirror, P2(mirror), source=f, dirichlet_data=bc))["scalar"]
    pts = np.random.default_rng(1).random((30, 2)) * 0.8 + 0.1
    ref = pts.copy()
    ref[:, 0] = 1 - ref[:, 0]
    assert np.abs(u(pts) - um(ref)).max() <= 1e-10
    # on a non-symmetric mesh the reflection holds up to discretization error
    assert np.abs(u(pts) - u(ref)).max() < 1e-3


def test_constraint_idempotence():
    m = build_stripe(1, 0.5, 0.25)
    V = P2vec(m)

    def build(times):
        cs = ConstraintSet(V.ndof)
        pairs = V.node_pairs(m.periodic_pairs("x1"))
        ip = V.node_pairs(m.interface_pairs)
        for _ in range(times):
            cs.periodic(V.dofs(pairs[:, 0]), V.dofs(pairs[:, 1]))
            cs.jump(V.dofs(ip[:, 0]), V.dofs(ip[:, 1]), 0.5)
            cs.dirichlet(V.dofs(V.boundary_nodes("bottom")), 0.0)
            cs.add_mean_zero(np.ones(V.ndof))
        return cs

    a, b = build(1), build(2)
    Ta, ga, fa = a.resolve()
    Tb, gb, fb = b.resolve()
    assert np.array_equal(fa, fb) and np.array_equal(ga, gb)
    assert (Ta != Tb).nnz == 0
    assert len(b.mean_zero) == 1


def test_constraint_conflicts():
    cs = ConstraintSet(4)
    cs.dirichlet([0], 1.0)
    with pytest.raises(ConstraintError):
        cs.dirichlet([0], 2.0)
    cs.jump([1], [2], 1.0)
    with pytest.raises(ConstraintError):
        cs.jump([1], [2], 2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.floats(-2, 2)), min_size=1,
                max_size=12))
def test_jump_closure_is_consistent(links):
    cs = ConstraintSet(10)
    kept = []
    for m_, s_, j in links:
        if m_ == s_:
            continue
        try:
            cs.jump([m_], [s_], j)
            kept.append((m_, s_, j))
        except ConstraintError:
            pass
    T, g, free = cs.resolve()
    u = T @ np.random.default_rng(2).random(T.shape[1]) + g
    for m_, s_, j in kept:
        assert u[s_] == pytest.approx(u[m_] + j, abs=1e-9)
    # every constrained dof maps to exactly one free root
    assert np.all(np.diff(T.tocsr().indptr) == 1)


def test_profiles():
    m = unit_square(0.25, structured=False)
    P = P2(m)
    x = P.node_coords
    const = Field(P, np.full(P.ndof, 3.5))
    prof = evaluate_along_line(const, ((0.0, 0.3), (1.0, 0.3)), 11)
    assert np.allclose(prof.values, 3.5) and prof.mask.all()
    assert np.allclose(np.diff(prof.s), 0.1)
    quad = Field(P, x[:, 0] ** 2)
    prof = evaluate_along_line(quad, ((0.0, 0.37), (1.0, 0.37)), 23)
    assert np.abs(prof.values - prof.points[:, 0] ** 2).max() <= 1e-13
    with pytest.raises(ValueError):
        evaluate_along_line(quad, ((0.0, 0.5), (1.5, 0.5)), 5)


def test_profile_masks_obstacles():
    mesh = build_perforated_domain(0.25, 0.5, 0.0, h_pm=0.05)
    V = P2vec(mesh)
    f = Field(V, np.ones(V.ndof))
    prof = evaluate_along_line(f, ((0.0, -0.125), (1.0, -0.125)), 101)
    inside = np.zeros(101, bool)
    for cx, cy, r in mesh.circles:
        inside |= np.hypot(prof.points[:, 0] - cx, prof.points[:, 1] - cy) < r - 1e-9
    assert inside.any()
    assert np.array_equal(~prof.mask[inside], np.ones(inside.sum(), bool))
    assert np.isnan(prof.values[~prof.mask]).all()
    assert np.allclose(prof.values[prof.mask], 1.0)


def test_integrate_edge():
    m = build_stripe(1, 0.5, 0.2)
    P = P2(m)
    x = P.node_coords
    one = Field(P, np.ones(P.ndof))
    assert integrate_edge(one, "interface_S", side="+") == pytest.approx(1.0, abs=1e-13)
    assert integrate_edge(Field(P, x[:, 0]), "interface_S", side="-") == pytest.approx(0.5, abs=1e-13)
    r = build_rectangle((0.0, 1.0, 0.0, 1.0), 0.25)
    Q = P1(r)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        val = integrate_edge(Field(Q, Q.node_coords[:, 0]), "top", side="+")
    assert val == pytest.approx(0.5) and any("single-valued" in str(i.message) for i in w)
    with pytest.raises(KeyError):
        integrate_edge(one, "nonexistent")
