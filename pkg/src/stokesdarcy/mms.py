"""Manufactured-solution convergence checks for the Stokes and Darcy discretizations.

Stokes: stream function psi = sin(pi x) sin(pi y) on the unit square,
v = (psi_y, -psi_x), p = cos(pi x) cos(pi y), f = -lap v + grad p, Dirichlet
velocity everywhere and a mean-zero pressure.  Darcy: the harmonic
p = cos(pi x) cosh(pi y) with Dirichlet data on all sides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import P1, P2, ConstraintSet, P2vec, assemble_poisson, assemble_stokes, solve
from .fem.quadrature import triangle_rule
from .fem.spaces import physical_points
from .mesh import build_rectangle

PI = np.pi
SIDES = ("bottom", "right", "top", "left")


def stokes_exact(x, y):
    v = np.stack([PI * np.sin(PI * x) * np.cos(PI * y), -PI * np.cos(PI * x) * np.sin(PI * y)], -1)
    return v, np.cos(PI * x) * np.cos(PI * y)


def stokes_velocity_gradient(x, y):
    """[..., i, j] = d v_i / d x_j."""
    s, c = np.sin, np.cos
    g = np.empty(np.shape(x) + (2, 2))
    g[..., 0, 0] = PI ** 2 * c(PI * x) * c(PI * y)
    g[..., 0, 1] = -PI ** 2 * s(PI * x) * s(PI * y)
    g[..., 1, 0] = PI ** 2 * s(PI * x) * s(PI * y)
    g[..., 1, 1] = -PI ** 2 * c(PI * x) * c(PI * y)
    return g


def stokes_forcing(x, y):
    # -lap v = 2 pi^2 v for this stream function
    v, _ = stokes_exact(x, y)
    gp = np.stack([-PI * np.sin(PI * x) * np.cos(PI * y), -PI * np.cos(PI * x) * np.sin(PI * y)], -1)
    return 2 * PI ** 2 * v + gp


def darcy_exact(x, y):
    return np.cos(PI * x) * np.cosh(PI * y)


def darcy_gradient(x, y):
    return np.stack([-PI * np.sin(PI * x) * np.cosh(PI * y), PI * np.cos(PI * x) * np.sinh(PI * y)], -1)


def _errors(field, exact, grad=None, order=8, divergence=False):
    """L2 error and (optionally) H1 seminorm error by high-order quadrature.

    With divergence=True the L2 norm of div(field) is returned instead.
    """
    mesh = field.mesh
    lam, w = triangle_rule(order)
    cells = np.repeat(np.arange(mesh.n_triangles), len(w))
    lam_all = np.tile(lam, (mesh.n_triangles, 1))
    x = physical_points(mesh, lam).reshape(-1, 2)
    area = 0.5 * np.abs(mesh.signed_areas())
    wq = (area[:, None] * w[None, :]).ravel()
    if divergence:
        gh = field.cell_gradients(cells, lam_all)
        return float(np.sqrt(wq @ (gh[:, 0, 0] + gh[:, 1, 1]) ** 2)), None
    uh = field.cell_values(cells, lam_all)
    u = exact(x[:, 0], x[:, 1])
    e = (uh - u).reshape(len(wq), -1)
    l2 = float(np.sqrt(np.einsum("q,qc->", wq, e ** 2)))
    if grad is None:
        return l2, None
    gh = field.cell_gradients(cells, lam_all).reshape(len(wq), -1)
    g = grad(x[:, 0], x[:, 1]).reshape(len(wq), -1)
    return l2, float(np.sqrt(np.einsum("q,qc->", wq, (gh - g) ** 2)))


def _mean(field, order=8):
    mesh = field.mesh
    lam, w = triangle_rule(order)
    cells = np.repeat(np.arange(mesh.n_triangles), len(w))
    area = 0.5 * np.abs(mesh.signed_areas())
    wq = (area[:, None] * w[None, :]).ravel()
    return float(wq @ field.cell_values(cells, np.tile(lam, (mesh.n_triangles, 1))) / wq.sum())


def stokes_errors(h, structured=True):
    mesh = build_rectangle((0.0, 1.0, 0.0, 1.0), h, structured)
    V, Q = P2vec(mesh), P1(mesh)
    n = V.n_nodes
    nodes = V.boundary_nodes(*SIDES)
    xb = V.node_coords[nodes]
    vb, _ = stokes_exact(xb[:, 0], xb[:, 1])
    cs = ConstraintSet(V.ndof + Q.ndof)
    cs.dirichlet(nodes, vb[:, 0])
    cs.dirichlet(nodes + n, vb[:, 1])
    system = assemble_stokes(mesh, V, Q, volume_force=stokes_forcing,
                             constraints=cs, mean_zero=True)
    sol = solve(system)
    ev, ev1 = _errors(sol["velocity"], lambda x, y: stokes_exact(x, y)[0], stokes_velocity_gradient)
    div, _ = _errors(sol["velocity"], None, order=8, divergence=True)
    p = sol["pressure"]
    shift = _mean(p)  # exact pressure has zero mean; the discrete one only up to quadrature
    ep, _ = _errors(p, lambda x, y: stokes_exact(x, y)[1] + shift)
    return {"h": mesh.hmax(), "velocity_l2": ev, "velocity_h1": ev1, "pressure_l2": ep,
            "divergence_l2": div, "residual": sol.residual, "ndof": sol.ndof}


def darcy_errors(h, degree=1, structured=True):
    mesh = build_rectangle((0.0, 1.0, 0.0, 1.0), h, structured)
    space = P1(mesh) if degree == 1 else P2(mesh)
    system = assemble_poisson(mesh, space, np.eye(2),
                              dirichlet_data={s: darcy_exact for s in SIDES})
    sol = solve(system)
    e, e1 = _errors(sol["scalar"], darcy_exact, darcy_gradient)
    return {"h": mesh.hmax(), "l2": e, "h1": e1, "residual": sol.residual, "ndof": sol.ndof}


def observed_orders(hs, errs):
    hs, errs = np.asarray(hs, float), np.asarray(errs, float)
    return np.log(errs[:-1] / errs[1:]) / np.log(hs[:-1] / hs[1:])


@dataclass
class ConvergenceStudy:
    name: str
    h: list
    errors: dict  # norm -> list of errors
    orders: dict  # norm -> array of observed rates

    def lines(self):
        out = [f"{self.name}: h = " + " ".join(f"{h:.4g}" for h in self.h)]
        for k, e in self.errors.items():
            out.append(f"  {k}: errors " + " ".join(f"{x:.3e}" for x in e)
                       + " orders " + " ".join(f"{r:.3f}" for r in self.orders[k]))
        return out


def run_convergence(levels=(8, 16, 32, 64)):
    """Stokes and P1/P2 Darcy studies over uniform meshes with h = 1/n."""
    hs = [1.0 / n for n in levels]
    studies = []
    st = [stokes_errors(h) for h in hs]
    norms = ("velocity_l2", "velocity_h1", "pressure_l2", "divergence_l2")
    errs = {k: [r[k] for r in st] for k in norms}
    studies.append(ConvergenceStudy("stokes", hs, errs,
                                    {k: observed_orders(hs, e) for k, e in errs.items()}))
    for deg in (1, 2):
        dr = [darcy_errors(h, deg) for h in hs]
        errs = {k: [r[k] for r in dr] for k in ("l2", "h1")}
        studies.append(ConvergenceStudy(f"darcy_p{deg}", hs, errs,
                                        {k: observed_orders(hs, e) for k, e in errs.items()}))
    return studies
