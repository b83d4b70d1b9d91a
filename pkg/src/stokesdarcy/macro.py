"""Monolithic macroscale Stokes-Darcy solver with selectable interface conditions.

Unknowns: Taylor-Hood (v, p) on the free-flow rectangle and a quadratic Darcy
pressure P on the porous rectangle.  With n = e2 on Σ (pointing into the free
flow) the Stokes boundary term on Σ is ∫ (∂2 v1) φ1 + (∂2 v2 - p) φ2, and the
Darcy boundary term is ∫ v^pm·e2 ψ.  Every condition set is written as

    ∂2 v1      = a_v v1 + a_p1 ∂1P + a_p2 ∂2P + a_dv ∂1 v1           (slip)
    ∂2 v2 - p  = -P + Ns (∂2 v1) + b_p1 ∂1P + b_p2 ∂2P + b_dv ∂1 v1   (normal stress)
    v^pm·e2    = v2 + c_dv ∂1 v1                                     (mass)

and substituted into those boundary terms, which gives a nonsymmetric
coupled matrix.  Σ traces of both meshes must coincide edge by edge.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import EffectiveCoefficients
from .fem import P1, P2, ConstraintSet, Field, P2vec, SparseSystem, solve
from .fem.assembly import EdgeSet, _coo, divergence, edge_tabulate, load, mass, stiffness, \
    tabulate, vector_laplacian
from .fem.fields import line_points, locator
from .fem.quadrature import triangle_rule
from .mesh import build_rectangle

log = logging.getLogger(__name__)

VARIANTS = ("classical", "generalized", "higher_order")


@dataclass(frozen=True)
class ConditionSet:
    variant: str
    alpha: float = 1.0
    K_char: float | None = None
    coeffs: EffectiveCoefficients | None = None
    eps: float = 0.05

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown condition set {self.variant!r}; expected one of {VARIANTS}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.variant == "classical":
            if not self.alpha > 0:
                raise ValueError("Beavers-Joseph alpha must be positive")
            if self.K_char is not None and not self.K_char > 0:
                raise ValueError("characteristic permeability must be positive")
        else:
            if self.coeffs is None:
                raise ValueError(f"{self.variant} conditions need effective coefficients")
            if abs(self.coeffs.N1) < 1e-8:
                raise ValueError("|N1| < 1e-8: slip condition cannot be solved for the normal "
                                 "derivative")

    @classmethod
    def classical(cls, alpha=1.0, K_char=None, eps=0.05):
        return cls("classical", alpha=alpha, K_char=K_char, eps=eps)

    @classmethod
    def generalized(cls, coeffs, eps=0.05):
        return cls("generalized", coeffs=coeffs, eps=eps)

    @classmethod
    def higher_order(cls, coeffs, eps=0.05):
        return cls("higher_order", coeffs=coeffs, eps=eps)

    def constants(self, K):
        """Coefficients of the generic slip / normal-stress / mass relations."""
        e = self.eps
        z = dict(a_v=0.0, a_p1=0.0, a_p2=0.0, a_dv=0.0, ns=0.0, b_p1=0.0, b_p2=0.0, b_dv=0.0,
                 c_dv=0.0)
        if self.variant == "classical":
            kc = self.K_char if self.K_char is not None else e * e * K[0, 0]
            g = self.alpha / np.sqrt(kc)
            # (v - v^pm)·τ = (sqrt(K)/α) ∂2 v1 with v^pm = -ε²K∇P
            z.update(a_v=g, a_p1=g * e * e * K[0, 0], a_p2=g * e * e * K[0, 1])
            return z
        c = self.coeffs
        n1 = c.N1
        z.update(a_v=-1.0 / (e * n1), a_p1=e * c.M1[0] / n1, a_p2=e * c.M1[1] / n1, ns=c.Ns)
        if self.variant == "higher_order":
            z.update(a_dv=(c.E1 + c.L1) / n1 ** 2, b_p1=-e * c.Mw[0], b_p2=-e * c.Mw[1],
                     b_dv=-(c.Leta + c.Eb + n1) / n1, c_dv=-e * c.W / n1)
        return z


def reduced_coefficients(coeffs):
    """Coefficients for which the higher-order set coincides with the generalized one."""
    return replace(coeffs, W=0.0, M1=(coeffs.M1[0], 0.0), Mw=(0.0, 0.0), E1=0.0, L1=0.0,
                   Leta=-(coeffs.Eb + coeffs.N1), diagnostics={})


@dataclass
class MacroProblem:
    K: np.ndarray = field(default_factory=lambda: 1.99e-2 * np.eye(2))
    eps: float = 0.05
    h: float = 1.0 / 40
    ff_bounds: tuple = (0.0, 1.0, 0.0, 0.5)
    pm_bounds: tuple = (0.0, 1.0, -0.5, 0.0)
    lid_velocity: float = 1.0
    bottom_pressure: float = 0.0
    structured: bool = False
    darcy_flux: float | None = None  # Darcy-only run with prescribed v^pm·e2 on Σ

    def __post_init__(self):
        self.K = np.asarray(self.K, float)
        if abs(self.ff_bounds[2] - self.pm_bounds[3]) > 1e-14 or \
                self.ff_bounds[:2] != self.pm_bounds[:2]:
            raise ValueError("Σ must be the shared horizontal edge of both rectangles")
        self._meshes = None

    @property
    def K_eps(self):
        return self.eps ** 2 * self.K

    @property
    def sigma_y(self):
        return self.ff_bounds[2]

    def meshes(self):
        if self._meshes is None:
            ff = build_rectangle(self.ff_bounds, self.h, self.structured)
            pm = build_rectangle(self.pm_bounds, self.h, self.structured)
            self._meshes = (ff, pm)
        return self._meshes


@dataclass
class MacroSolution:
    problem: MacroProblem
    conditions: ConditionSet | None
    vff: Field | None
    pff: Field | None
    ppm: Field
    vpm: Field
    info: dict

    def profile(self, segment, n=400):
        """Samples along a segment: (s, points, v (n,2), p (n,)); free-flow values on Σ."""
        s, pts = line_points(segment, n)
        v = np.full((n, 2), np.nan)
        p = np.full(n, np.nan)
        y = self.problem.sigma_y
        upper = pts[:, 1] >= y - 1e-14
        if self.vff is not None and upper.any():
            v[upper], p[upper] = _sample(self.vff, pts[upper]), _sample(self.pff, pts[upper])
        lower = ~upper if self.vff is not None else np.ones(n, bool)
        if lower.any():
            v[lower], p[lower] = _sample(self.vpm, pts[lower]), _sample(self.ppm, pts[lower])
        return s, pts, v, p


def _sample(f, pts):
    cells, lam = locator(f.mesh).locate(pts)
    if (cells < 0).any():
        raise ValueError("profile points outside the macro mesh")
    return f.cell_values(cells, lam)


# ---------------------------------------------------------------------------
# Σ traces


class _SigmaTrace:
    """Matched Σ edges of the free-flow (bottom) and porous (top) meshes."""

    def __init__(self, ff, pm, y):
        ef, ep = ff.tagged("bottom"), pm.tagged("top")
        if len(ef) != len(ep):
            raise ValueError(f"non-matching Σ trace meshes: {len(ef)} vs {len(ep)} edges")
        xf = ff.vertices[:, 0]
        key = {}
        for a in np.unique(ep):
            key[round(float(pm.vertices[a, 0]), 11)] = a
        pairs = []
        for a, b in ef:
            try:
                pairs.append((key[round(float(xf[a]), 11)], key[round(float(xf[b]), 11)]))
            except KeyError:
                raise ValueError("non-matching Σ trace meshes: vertex without partner") from None
        pairs = np.array(pairs, int)
        if np.abs(pm.vertices[pairs][..., 0] - ff.vertices[ef][..., 0]).max() > 1e-12 or \
                np.abs(ff.vertices[ef][..., 1] - y).max() > 1e-12:
            raise ValueError("non-matching Σ trace meshes")
        self.es_ff = EdgeSet.from_edges(ff, ef)
        self.es_pm = EdgeSet.from_edges(pm, pairs)


def _edge_term(test, trial, coef, wl, shape):
    tv, td = test
    sv, sd = trial
    loc = coef * np.einsum("eq,eqa,eqb->eab", wl, tv, sv)
    na, nb = td.shape[1], sd.shape[1]
    return _coo(np.repeat(td, nb, axis=1), np.tile(sd, (1, na)), loc, shape)


def _trace_ops(V, Q, D, trace, order, nv, nq):
    phi, dphi, x, wl = edge_tabulate(V, trace.es_ff, order)
    vd = V.cell_nodes[trace.es_ff.cells]
    n = V.n_nodes
    qphi, _, _, _ = edge_tabulate(Q, trace.es_ff, order)
    qd = Q.cell_nodes[trace.es_ff.cells] + nv
    dphi_, ddphi, xd, _ = edge_tabulate(D, trace.es_pm, order)
    if np.abs(x - xd).max() > 1e-12:
        raise ValueError("Σ quadrature points of the two traces do not coincide")
    dd = D.cell_nodes[trace.es_pm.cells] + nv + nq
    ops = {"v1": (phi, vd), "v2": (phi, vd + n), "d1v1": (dphi[..., 0], vd),
           "d2v1": (dphi[..., 1], vd), "p": (qphi, qd), "P": (dphi_, dd),
           "d1P": (ddphi[..., 0], dd), "d2P": (ddphi[..., 1], dd)}
    return ops, wl, x


def assemble_coupled(problem: MacroProblem, conditions: ConditionSet, order=5):
    ff, pm = problem.meshes()
    V, Q, D = P2vec(ff), P1(ff), P2(pm)
    nv, nq, nd = V.ndof, Q.ndof, D.ndof
    N = nv + nq + nd
    scale = 1.0 / problem.eps ** 2  # Darcy rows scaled to O(1)
    A = vector_laplacian(V)
    B = divergence(V, Q)
    Kd = stiffness(D, problem.K_eps) * scale
    M = sp.bmat([[A, B.T, None], [B, None, None], [None, None, Kd]], format="csr")
    trace = _SigmaTrace(ff, pm, problem.sigma_y)
    ops, wl, _ = _trace_ops(V, Q, D, trace, order, nv, nq)
    z = conditions.constants(problem.K)
    shape = (N, N)
    terms = [("v1", "v1", z["a_v"]), ("v1", "d1P", z["a_p1"]), ("v1", "d2P", z["a_p2"]),
             ("v1", "d1v1", z["a_dv"]),
             ("v2", "P", -1.0), ("v2", "v1", z["ns"] * z["a_v"]),
             ("v2", "d1P", z["ns"] * z["a_p1"] + z["b_p1"]),
             ("v2", "d2P", z["ns"] * z["a_p2"] + z["b_p2"]),
             ("v2", "d1v1", z["ns"] * z["a_dv"] + z["b_dv"]),
             ("P", "v2", scale), ("P", "d1v1", scale * z["c_dv"])]
    for test, trial, c in terms:
        if c != 0.0:
            M = M + _edge_term(ops[test], ops[trial], c, wl, shape)
    b = np.zeros(N)
    cs = _macro_constraints(problem, V, D, nv, nq)
    system = SparseSystem(M.tocsr(), b, cs, {"velocity": slice(0, nv), "pressure": slice(nv, nv + nq),
                                             "darcy": slice(nv + nq, N)},
                          {"velocity": V, "pressure": Q, "darcy": D},
                          {"variant": conditions.variant, "constants": z, "scale": scale})
    return system


def _macro_constraints(problem, V, D, nv, nq):
    cs = ConstraintSet(nv + nq + D.ndof)
    n = V.n_nodes
    x = V.node_coords
    top = V.boundary_nodes("top")
    x0, x1 = problem.ff_bounds[:2]
    lid = top[(np.abs(x[top, 0] - x0) > 1e-12) & (np.abs(x[top, 0] - x1) > 1e-12)]
    fixed = np.setdiff1d(V.boundary_nodes("left", "right"), lid)
    cs.dirichlet(np.concatenate([fixed, fixed + n]), 0.0)
    cs.dirichlet(lid, problem.lid_velocity)
    cs.dirichlet(lid + n, 0.0)
    bot = D.boundary_nodes("bottom")
    cs.dirichlet(bot + nv + nq, problem.bottom_pressure)
    return cs


# ---------------------------------------------------------------------------
# solve and post-processing


def darcy_velocity(ppm: Field, K_eps):
    """L2 projection of the elementwise -K^ε∇P onto continuous quadratic vectors."""
    mesh = ppm.mesh
    Vd = P2vec(mesh)
    lam, _ = triangle_rule(6)
    _, dphi, _ = tabulate(ppm.space, lam)
    g = np.einsum("mqad,ma->mqd", dphi, ppm.values[ppm.space.cell_nodes])
    f = -np.einsum("ij,mqj->mqi", np.asarray(K_eps, float), g)
    rhs = load(Vd, f, order=6)
    M = mass(P2(mesh)).tocsc()
    lu = spla.splu(M)
    n = Vd.n_nodes
    vals = np.concatenate([lu.solve(rhs[:n]), lu.solve(rhs[n:])])
    return Field(Vd, vals, "darcy_velocity")


def solve_macro(problem: MacroProblem, conditions: ConditionSet | None = None):
    if problem.darcy_flux is not None:
        return _solve_darcy_only(problem)
    if conditions is None:
        raise ValueError("condition set required")
    system = assemble_coupled(problem, conditions)
    try:
        sol = solve(system)
    except Exception as exc:
        raise RuntimeError(f"macro solve failed for {conditions.variant} conditions "
                           f"(constants {system.info['constants']}): {exc}") from exc
    vff, pff = sol["velocity"], sol["pressure"]
    ppm = Field(sol["darcy"].space, sol["darcy"].values, "ppm")
    vpm = darcy_velocity(ppm, problem.K_eps)
    info = {"variant": conditions.variant, "ndof": system.ndof, "ndof_reduced": sol.ndof,
            "residual": sol.residual, "constants": system.info["constants"]}
    out = MacroSolution(problem, conditions, vff, pff, ppm, vpm, info)
    out.info.update(flux_balance(out, system, sol.x))
    out.info["slip_residual"] = slip_residual(out)
    return out


def _solve_darcy_only(problem):
    _, pm = problem.meshes()
    D = P2(pm)
    A = stiffness(D, problem.K_eps)
    es = EdgeSet.from_edges(pm, pm.tagged("top"))
    from .fem.assembly import edge_load

    # ∫K∇P·∇ψ = ∫_Σ (K∇P·e2) ψ = -∫_Σ g ψ with g = v^pm·e2
    b = -edge_load(D, es, problem.darcy_flux)
    cs = ConstraintSet(D.ndof)
    cs.dirichlet(D.boundary_nodes("bottom"), problem.bottom_pressure)
    system = SparseSystem(A, b, cs, {"darcy": slice(0, D.ndof)}, {"darcy": D})
    sol = solve(system)
    ppm = Field(D, sol["darcy"].values, "ppm")
    return MacroSolution(problem, None, None, None, ppm, darcy_velocity(ppm, problem.K_eps),
                         {"variant": "darcy_only", "ndof": D.ndof, "residual": sol.residual})


def _sigma_values(sol, order=5):
    ff, pm = sol.problem.meshes()
    V, Q, D = sol.vff.space, sol.pff.space, sol.ppm.space
    trace = _SigmaTrace(ff, pm, sol.problem.sigma_y)
    ops, wl, x = _trace_ops(V, Q, D, trace, order, 0, 0)
    vec = {"velocity": sol.vff.values, "pressure": sol.pff.values, "darcy": sol.ppm.values}
    src = {"v1": "velocity", "v2": "velocity", "d1v1": "velocity", "d2v1": "velocity",
           "p": "pressure", "P": "darcy", "d1P": "darcy", "d2P": "darcy"}
    out = {k: np.einsum("eqa,ea->eq", vals, vec[src[k]][dofs]) for k, (vals, dofs) in ops.items()}
    return out, wl, x


def flux_balance(sol, system, x):
    """Σ flux of the projected Darcy velocity vs the mass-condition right side; net outflow."""
    vals, wl, _ = _sigma_values(sol)
    z = system.info["constants"]
    rhs = float(np.sum(wl * (vals["v2"] + z["c_dv"] * vals["d1v1"])))
    es = EdgeSet.from_edges(sol.ppm.mesh, sol.ppm.mesh.tagged("top"))
    phi, _, _, wl2 = edge_tabulate(sol.vpm.space, es, 5)
    v2 = sol.vpm.components()[1][sol.vpm.space.cell_nodes[es.cells]]
    darcy = float(np.einsum("eq,eqa,ea->", wl2, phi, v2))
    # consistent bottom outflow from the residual of the Darcy rows at the Dirichlet nodes
    sl = system.partition["darcy"]
    r = (system.A @ x - system.b)[sl] / system.info["scale"]
    bot = sol.ppm.space.boundary_nodes("bottom")
    outflow = float(-r[bot].sum())
    return {"sigma_flux_darcy": darcy, "sigma_flux_condition": rhs,
            "flux_mismatch": abs(darcy - rhs), "net_outflow": outflow}


def slip_residual(sol):
    """Relative L2(Σ) residual of the slip relation evaluated with the discrete traces."""
    vals, wl, _ = _sigma_values(sol)
    z = sol.info["constants"]
    pred = z["a_v"] * vals["v1"] + z["a_p1"] * vals["d1P"] + z["a_p2"] * vals["d2P"] + \
        z["a_dv"] * vals["d1v1"]
    r = vals["d2v1"] - pred
    ref = np.sqrt(np.sum(wl * vals["d2v1"] ** 2)) or 1.0
    return float(np.sqrt(np.sum(wl * r ** 2)) / ref)
