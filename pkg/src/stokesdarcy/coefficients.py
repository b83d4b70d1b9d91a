"""Cell and boundary-layer problems and the effective coefficients they define.

All stripe problems live on one mesh of Z^m = (0,1)x(-m,m) whose interface S
carries duplicated nodes.  Velocity jumps on S become constraints
plus = minus + jump, stress jumps become edge loads on the minus side.
Pressures are normalized so that their mean over the lowest porous cell is
zero (far-field value zero in the porous part), then constants are read off
as integrals over S of the plus-side traces.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .fem import P1, P2, ConstraintSet, EdgeSet, Field, P2vec, assemble_stokes, solve
from .fem.assembly import edge_load, load, mass, tabulate, vector_laplacian
from .fem.fields import integrate_edge
from .fem.quadrature import edge_rule, triangle_rule
from .mesh import FREE, POROUS, build_stripe, build_unit_cell, default_circle_segments

log = logging.getLogger(__name__)

REFERENCE = {
    "k11": 1.99e-2, "N1": -3.04e-1, "Ns": 0.0, "M1_1": -4.76e-2, "Mw_1": 0.0, "M1_2": 0.0,
    "Mw_2": 2.58e-2, "E1": 0.0, "Eb": 3.04e-1, "L1": 0.0, "Leta": 4.70e-3, "W": 4.76e-2,
}


class StripeTooShortError(RuntimeError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# data types


@dataclass
class CellSolution:
    mesh: object
    velocity: list  # w^1, w^2 as Fields on P2vec
    pressure: list  # pi^1, pi^2 (mean zero)
    K: np.ndarray
    traction: list  # residual of the cell equations at every velocity dof (boundary tractions)
    residual: float


@dataclass
class StripeSolution:
    problem: str
    velocity: Field
    pressure: Field | None
    constants: dict
    diagnostics: dict = field(default_factory=dict)


@dataclass
class EffectiveCoefficients:
    K: np.ndarray
    N1: float
    Ns: float
    M1: tuple
    Mw: tuple
    W: float
    L1: float
    Leta: float
    E1: float
    Eb: float
    d: float = 0.5
    m: int = 4
    h: float = 0.05
    circle_segments: int = 32
    version: str = __version__
    diagnostics: dict = field(default_factory=dict)

    KEYS = ("k11", "k12", "k21", "k22", "N1", "Ns", "M1_1", "M1_2", "Mw_1", "Mw_2", "W", "L1",
            "Leta", "E1", "Eb")

    def as_dict(self):
        K = self.K
        return {"k11": K[0, 0], "k12": K[0, 1], "k21": K[1, 0], "k22": K[1, 1], "N1": self.N1,
                "Ns": self.Ns, "M1_1": self.M1[0], "M1_2": self.M1[1], "Mw_1": self.Mw[0],
                "Mw_2": self.Mw[1], "W": self.W, "L1": self.L1, "Leta": self.Leta,
                "E1": self.E1, "Eb": self.Eb}

    def to_text(self):
        lines = [f"{k}={float(v):.12e}" for k, v in self.as_dict().items()]
        lines += [f"d={self.d!r}", f"m={self.m}", f"h={self.h!r}",
                  f"circle_segments={self.circle_segments}", f"version={self.version}"]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        f = {k: float(kv[k]) for k in cls.KEYS if k in kv}
        K = np.array([[f["k11"], f.get("k12", 0.0)], [f.get("k21", f.get("k12", 0.0)), f["k22"]]])
        return cls(K, f["N1"], f["Ns"], (f["M1_1"], f["M1_2"]), (f["Mw_1"], f["Mw_2"]), f["W"],
                   f["L1"], f["Leta"], f["E1"], f["Eb"], float(kv.get("d", 0.5)),
                   int(kv.get("m", 4)), float(kv.get("h", 0.0)),
                   int(kv.get("circle_segments", 0)), kv.get("version", ""))

    @classmethod
    def read(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())

    def reference_deltas(self):
        """Relative (or absolute for zero entries) deviations from the reference values for d = 0.5."""
        if abs(self.d - 0.5) > 1e-12:
            return {}
        mine = self.as_dict()
        out = {}
        for k, ref in REFERENCE.items():
            out[k] = (mine[k] - ref) / abs(ref) if ref else mine[k]
        return out


# ---------------------------------------------------------------------------
# cell problems


def _periodic_cell_constraints(mesh, V, Q):
    nv = V.ndof
    cs = ConstraintSet(nv + Q.ndof)
    cs.dirichlet(V.dofs(V.boundary_nodes("obstacle")), 0.0)
    for pm in mesh.periodic:
        pairs = V.node_pairs(pm.pairs)
        for c in range(2):
            cs.periodic(c * V.n_nodes + pairs[:, 0], c * V.n_nodes + pairs[:, 1])
        cs.periodic(nv + pm.pairs[:, 0], nv + pm.pairs[:, 1])
    return cs


def solve_cell_problems(cell_mesh):
    """Periodic Stokes cell problems with unit body force e_j; K_ij = ∫ w_i^j."""
    if not len(cell_mesh.tagged("obstacle")):
        raise ValueError("cell without inclusion: permeability undefined (no Dirichlet boundary)")
    V, Q = P2vec(cell_mesh), P1(cell_mesh)
    ws, ps, tr = [], [], []
    K = np.zeros((2, 2))
    res = 0.0
    ones = [load(V, e) for e in np.eye(2)]
    for j in range(2):
        cs = _periodic_cell_constraints(cell_mesh, V, Q)
        system = assemble_stokes(cell_mesh, V, Q, volume_force=np.eye(2)[j], constraints=cs,
                                 mean_zero=True)
        sol = solve(system)
        res = max(res, sol.residual)
        w, p = sol["velocity"], sol["pressure"]
        ws.append(w)
        ps.append(p)
        tr.append((system.A @ sol.x - system.b)[:V.ndof])
        for i in range(2):
            K[i, j] = ones[i] @ w.values
    return CellSolution(cell_mesh, ws, ps, K, tr, res), K


# ---------------------------------------------------------------------------
# stripe machinery


class _Stripe:
    def __init__(self, mesh, decay_tol=1e-6):
        self.mesh = mesh
        self.decay_tol = decay_tol
        self.m = int(round(-mesh.vertices[:, 1].min()))
        self.V, self.Q = P2vec(mesh), P1(mesh)
        V = self.V
        self.nv = V.ndof
        self.ndof = V.ndof + self.Q.ndof
        self.s_pairs = V.node_pairs(mesh.interface_pairs)  # (minus, plus) nodes
        self.lat_pairs = V.node_pairs(mesh.periodic_pairs("x1"))
        self.p_lat_pairs = mesh.periodic_pairs("x1")
        cen = mesh.vertices[mesh.triangles].mean(axis=1)
        self.plus = mesh.regions == FREE
        self.minus = mesh.regions == POROUS
        self.bottom_cell = cen[:, 1] < -self.m + 1
        s = mesh.tagged("interface_S")
        own = mesh.regions[[_owner(mesh, e) for e in s]]
        self.s_minus_edges = s[own == POROUS]
        ip = dict(map(tuple, mesh.interface_pairs))
        self.s_plus_twins = np.array([[ip[a], ip[b]] for a, b in self.s_minus_edges], int)
        self.es_minus = EdgeSet.from_edges(mesh, self.s_minus_edges, self.minus)
        self.es_plus = EdgeSet.from_edges(mesh, self.s_plus_twins, self.plus)
        self._mass = None

    def constraints(self, jump=None, top_dirichlet=False):
        V, nn = self.V, self.V.n_nodes
        cs = ConstraintSet(self.ndof)
        tags = ["obstacle", "bottom"] + (["top"] if top_dirichlet else [])
        cs.dirichlet(V.dofs(V.boundary_nodes(*tags)), 0.0)
        for c in range(2):
            cs.periodic(c * nn + self.lat_pairs[:, 0], c * nn + self.lat_pairs[:, 1])
        cs.periodic(self.nv + self.p_lat_pairs[:, 0], self.nv + self.p_lat_pairs[:, 1])
        jump = np.zeros((len(self.s_pairs), 2)) if jump is None else jump
        for c in range(2):
            cs.jump(c * nn + self.s_pairs[:, 0], c * nn + self.s_pairs[:, 1], jump[:, c])
        return cs

    def solve(self, problem, force=None, load_vec=None, jump=None, div=None, top_dirichlet=False):
        cs = self.constraints(jump, top_dirichlet)
        system = assemble_stokes(self.mesh, self.V, self.Q, volume_force=force, constraints=cs,
                                 mean_zero=True if top_dirichlet else None, div_data=div)
        if load_vec is not None:
            system.b[:self.nv] += load_vec
        sol = solve(system)
        v, p = sol["velocity"], sol["pressure"]
        if not top_dirichlet:
            p = Field(self.Q, p.values - self.region_mean(p, self.bottom_cell), p.name)
        sol.decay = self.check_decay(problem, v)
        sol.stabilization = self.stabilization(v)
        return v, p, sol, system

    # -- measurements -------------------------------------------------------
    def region_mean(self, f, mask):
        one = load(self.Q, 1.0, elements=mask, order=2)
        if f.space.ncomp == 1 and f.space.degree == 1:
            return float(one @ f.values) / float(one.sum())
        raise ValueError("region_mean expects a P1 scalar field")

    def s_integral(self, f, side="+", component=None):
        return integrate_edge(f, "interface_S", side=side, component=component)

    def line_average(self, f, y, component=None, n=801):
        from .fem.fields import evaluate_along_line

        prof = evaluate_along_line(f, ((0.0, y), (1.0, y)), n)
        vals = prof.values if component is None else prof.values[:, component]
        return float(np.mean(vals[:-1]))

    def check_decay(self, problem, v):
        """L2 norm of v on the lowest cell relative to the whole stripe; warns above 1e-6."""
        if self._mass is None:
            S = P2(self.mesh)
            self._mass = (mass(S), mass(S, elements=self.bottom_cell))
        M, Mb = self._mass
        tot = sum(c @ (M @ c) for c in v.components())
        low = sum(c @ (Mb @ c) for c in v.components())
        ratio = float(np.sqrt(low / tot)) if tot > 0 else 0.0
        if ratio > self.decay_tol:
            raise StripeTooShortError(f"{problem}: norm on the lowest cell is {ratio:.2e} of the "
                                      f"total (> {self.decay_tol:g}); stripe too short, increase m")
        return ratio

    def stabilization(self, v, lines=(1.0, 1.5, 2.0)):
        """Largest variance, over velocity components, of horizontal averages on the lines."""
        lines = [y for y in lines if y < self.m]
        avg = np.array([[self.line_average(v, y, c) for c in range(2)] for y in lines])
        return float(avg.var(axis=0).max())

    def s_node_map(self, cell_V):
        """Cell top-edge nodes -> stripe S-minus nodes, matched by x coordinate."""
        cx = cell_V.node_coords
        top = np.flatnonzero(np.abs(cx[:, 1] - 1.0) < 1e-12)
        sx = self.V.node_coords
        minus = self.s_pairs[:, 0]
        key = {round(float(sx[i, 0]), 10): i for i in minus}
        return top, np.array([key[round(float(cx[i, 0]), 10)] for i in top], int)

    def pair_index(self, minus_nodes):
        pos = {n: k for k, n in enumerate(self.s_pairs[:, 0])}
        return np.array([pos[n] for n in minus_nodes], int)


def _owner(mesh, e):
    from .fem.assembly import _edge_owner

    return _edge_owner(mesh)[(min(e), max(e))][0]


def _as_stripe(stripe):
    return stripe if isinstance(stripe, _Stripe) else _Stripe(stripe)


def _qp(field_, order=4, cells=None):
    """Values (M,Q[,2]) and gradients (M,Q[,2],2) of a field at quadrature points."""
    lam, _ = triangle_rule(order)
    sp_ = field_.space
    phi, dphi, _ = tabulate(sp_, lam, cells)
    nodes = sp_.cell_nodes if cells is None else sp_.cell_nodes[cells]
    comps = field_.components()
    vals = [np.einsum("qa,ma->mq", phi, c[nodes]) for c in comps]
    grads = [np.einsum("mqad,ma->mqd", dphi, c[nodes]) for c in comps]
    if len(comps) == 1:
        return vals[0], grads[0]
    return np.stack(vals, -1), np.stack(grads, -2)


def _constants(st, v, p):
    return st.s_integral(v, "+", 0), st.s_integral(p, "+")


# ---------------------------------------------------------------------------
# boundary-layer problems


def solve_t(stripe_mesh):
    """Unit tangential stress jump on S; N1 = ∫_S t1(+0), Ns = ∫_S s(+0)."""
    st = _as_stripe(stripe_mesh)
    load_vec = edge_load(st.V, st.es_minus, np.array([-1.0, 0.0]))
    v, p, sol, _ = st.solve("t", load_vec=load_vec)
    N1, Ns = _constants(st, v, p)
    diag = {"residual": sol.residual, "decay": sol.decay, "stabilization": sol.stabilization,
            "N1_line1": st.line_average(v, 1.0, 0), "Ns_line1": st.line_average(p, 1.0),
            "t1_avg": [st.line_average(v, y, 0) for y in (1.0, 1.5, 2.0)]}
    return StripeSolution("t", v, p, {"N1": N1, "Ns": Ns}, diag), N1, Ns


def solve_beta(stripe_mesh, cell_solution, K, j):
    """Velocity jump k_{2j} e2 - w^j and stress jump -(∇w^j - π^j I)e2 on S (j = 1, 2)."""
    st = _as_stripe(stripe_mesh)
    jump = np.zeros((len(st.s_pairs), 2))
    load_vec = np.zeros(st.nv)
    K = np.zeros((2, 2)) if K is None else np.asarray(K)
    if cell_solution is not None:
        cV = cell_solution.velocity[j - 1].space
        top, minus = st.s_node_map(cV)
        k = st.pair_index(minus)
        w = cell_solution.velocity[j - 1].values
        r = cell_solution.traction[j - 1]
        for c in range(2):
            jump[k, c] = -w[c * cV.n_nodes + top]
            # the consistent cell traction on the top edge acts on the minus side
            load_vec[c * st.V.n_nodes + minus] += r[c * cV.n_nodes + top]
        jump[:, 1] += K[1, j - 1]
    v, p, sol, _ = st.solve(f"beta{j}", load_vec=load_vec, jump=jump)
    M1, Mw = _constants(st, v, p)
    diag = {"residual": sol.residual, "decay": sol.decay, "stabilization": sol.stabilization,
            "M1_line1": st.line_average(v, 1.0, 0),
            "Mw_line1": st.line_average(p, 1.0)}
    return StripeSolution(f"beta{j}", v, p, {f"M1_{j}": M1, f"Mw_{j}": Mw}, diag), M1, Mw


def solve_zeta(stripe_mesh, t_solution, N1):
    """Minimal-energy ζ with ∇·ζ = t1 - H N1, ⟦ζ⟧ = W e2, zero on obstacles and cuts."""
    st = _as_stripe(stripe_mesh)
    t1, _ = _qp(t_solution.velocity)
    t1 = t1[..., 0]
    r = t1 - np.where(st.plus, N1, 0.0)[:, None]
    div = load(st.Q, r, order=4)
    W_h = -float(div.sum())  # exact discrete compatibility with the jump
    lam, w = triangle_rule(4)
    _, det = _area(st.mesh)
    W = -float(np.einsum("q,mq,m->", w, t1[st.minus], det[st.minus]))
    jump = np.zeros((len(st.s_pairs), 2))
    jump[:, 1] = W_h
    v, lam_p, sol, system = st.solve("zeta", div=div, jump=jump, top_dirichlet=True)
    # discrete constraint defect: pressure rows of the reduced system (periodic rows merged)
    T = system.eliminate()[2]
    defect = np.zeros(st.ndof)
    defect[st.nv:] = (system.A @ sol.x - system.b)[st.nv:]
    defect = T.T @ defect
    div_res = float(np.abs(defect).max() / max(np.abs(div).max(), 1e-300))
    dz = _normal_gradient_jump(st, v)
    diag = {"residual": sol.residual, "decay": sol.decay, "stabilization": sol.stabilization,
            "W_discrete": W_h, "compat": abs(W - W_h),
            "div_residual": div_res, "jump_dz2dy2": dz[1], "jump_dz1dy2": dz[0],
            "jump_pressure": st.s_integral(lam_p, "+") - st.s_integral(lam_p, "-")}
    if abs(W - W_h) > 1e-8:
        log.info("zeta: direct W and discrete compatibility differ by %.2e (cut-off)", abs(W - W_h))
    return StripeSolution("zeta", v, lam_p, {"W": W}, diag), W


def _area(mesh):
    from .fem.spaces import barycentric_gradients

    g, det = barycentric_gradients(mesh)
    return g, 0.5 * det


def _trace_gradients(st, v, es):
    t, w = edge_rule(5)
    lam = es.barycentric(t)
    from .fem.spaces import barycentric_gradients, basis_dlam

    g, _ = barycentric_gradients(st.mesh, es.cells)
    dphi = np.einsum("eqak,ekd->eqad", basis_dlam(2, lam), g)
    nodes = st.V.cell_nodes[es.cells]
    comps = v.components()
    return np.stack([np.einsum("eqad,ea->eqd", dphi, c[nodes]) for c in comps], -2), w


def _normal_gradient_jump(st, v):
    """∫_S ⟦∇v e2⟧ (both components) from one-sided discrete gradients."""
    gp, w = _trace_gradients(st, v, st.es_plus)
    gm, _ = _trace_gradients(st, v, st.es_minus)
    jump = gp[..., 1] - gm[..., 1]  # (E,Q,2): ⟦∂v_i/∂y2⟧
    return np.einsum("q,e,eqc->c", w, st.es_minus.length, jump)


def solve_xi(stripe_mesh, t_solution, Ns):
    """Volume force 2∂t/∂y1 - (s - H Ns) e1; L1 = ∫_S ξ1(+0), Leta = ∫_S η(+0)."""
    st = _as_stripe(stripe_mesh)
    if t_solution is None:
        force = np.zeros(st.nv)
    else:
        _, gt = _qp(t_solution.velocity)
        s, _ = _qp(t_solution.pressure)
        f = 2.0 * gt[..., 0]  # ∂t/∂y1: (M,Q,2)
        f[..., 0] -= s - np.where(st.plus, Ns, 0.0)[:, None]
        force = load(st.V, f, order=4)
    v, p, sol, _ = st.solve("xi", force=force)
    L1, Leta = _constants(st, v, p)
    diag = {"residual": sol.residual, "decay": sol.decay, "stabilization": sol.stabilization,
            "L1_line1": st.line_average(v, 1.0, 0),
            "Leta_line1": st.line_average(p, 1.0)}
    return StripeSolution("xi", v, p, {"L1": L1, "Leta": Leta}, diag), L1, Leta


def solve_c(stripe_mesh, zeta_solution):
    """Right side a(ζ, φ) + ∫_S ⟦∇ζ e2⟧·φ; E1 = ∫_S c1(+0), Eb = ∫_S b(+0)."""
    st = _as_stripe(stripe_mesh)
    rhs = np.zeros(st.nv)
    if zeta_solution is not None:
        z = zeta_solution.velocity
        rhs += vector_laplacian(st.V) @ z.values
        gp, _ = _trace_gradients(st, z, st.es_plus)
        gm, _ = _trace_gradients(st, z, st.es_minus)
        rhs += edge_load(st.V, st.es_minus, gp[..., 1] - gm[..., 1])
    v, p, sol, _ = st.solve("c", load_vec=rhs)
    E1, Eb = _constants(st, v, p)
    diag = {"residual": sol.residual, "decay": sol.decay, "stabilization": sol.stabilization,
            "E1_line1": st.line_average(v, 1.0, 0),
            "Eb_line1": st.line_average(p, 1.0)}
    return StripeSolution("c", v, p, {"E1": E1, "Eb": Eb}, diag), E1, Eb


def compute_all(d=0.5, m=4, h=0.05, circle_segments=None, h_far=None, workers=1, decay_tol=1e-6):
    """cell -> t -> {beta1, beta2, zeta, xi} -> c, with provenance.

    With workers > 1 the four problems of the middle stage run in a thread pool;
    results do not depend on the worker count.  decay_tol is the allowed norm
    ratio on the lowest porous cell before StripeTooShortError is raised.
    """
    nc = circle_segments or default_circle_segments(d, h)
    t0 = time.perf_counter()
    stage = "mesh"
    try:
        cell = build_unit_cell(d, h, nc)
        st = _Stripe(build_stripe(m, d, h, nc, h_far=h_far, cell=cell), decay_tol)
        stage = "cell"
        cs, K = solve_cell_problems(cell)
        stage = "t"
        tsol, N1, Ns = solve_t(st)
        jobs = {"beta1": (solve_beta, (st, cs, K, 1)), "beta2": (solve_beta, (st, cs, K, 2)),
                "zeta": (solve_zeta, (st, tsol, N1)), "xi": (solve_xi, (st, tsol, Ns))}
        out = {}
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as ex:
                futs = {k: ex.submit(f, *a) for k, (f, a) in jobs.items()}
                for k, fut in futs.items():
                    stage = k
                    out[k] = fut.result()
        else:
            for k, (f, a) in jobs.items():
                stage = k
                out[k] = f(*a)
        b1, M11, Mw1 = out["beta1"]
        b2, M12, Mw2 = out["beta2"]
        zsol, W = out["zeta"]
        xsol, L1, Leta = out["xi"]
        stage = "c"
        csol, E1, Eb = solve_c(st, zsol)
    except Exception as exc:
        raise StageError(stage, exc) from exc
    diag = {"runtime": time.perf_counter() - t0, "cell_residual": cs.residual,
            "stripe_ndof": st.ndof}
    for s in (tsol, b1, b2, zsol, xsol, csol):
        for k, v in s.diagnostics.items():
            diag[f"{s.problem}.{k}"] = v
    coeffs = EffectiveCoefficients(K, N1, Ns, (M11, M12), (Mw1, Mw2), W, L1, Leta, E1, Eb,
                                   d, m, h, nc, __version__, diag)
    log.info("coefficients d=%g m=%d h=%g in %.1fs", d, m, h, diag["runtime"])
    return coeffs
