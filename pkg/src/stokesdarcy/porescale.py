"""Pore-resolved lid-driven cavity over a perforated layer and its ensemble average."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fem import P1, ConstraintSet, EdgeSet, Field, P2vec, assemble_stokes, evaluate_along_line, solve
from .fem.assembly import edge_tabulate
from .mesh import build_perforated_domain

log = logging.getLogger(__name__)

CROSS_SECTIONS = {
    "sigma": ((0.0, 0.0), (1.0, 0.0)),
    "x1_0.7": ((0.7, -0.5), (0.7, 0.5)),
}


@dataclass
class PoreScaleRun:
    shift: float
    mesh: object
    velocity: Field | None
    pressure: Field | None
    info: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)  # name -> (Profile v, Profile p)

    def sample(self, cross_sections, n=400):
        for name, seg in cross_sections.items():
            self.profiles[name] = (evaluate_along_line(self.velocity, seg, n),
                                   evaluate_along_line(self.pressure, seg, n))
        return self.profiles

    def release(self):
        """Drop mesh and fields, keeping profiles and diagnostics."""
        self.mesh = self.velocity = self.pressure = None


@dataclass
class AveragedProfile:
    s: np.ndarray
    points: np.ndarray
    v: np.ndarray  # (n,2), NaN where no member has a valid sample
    p: np.ndarray
    count: np.ndarray  # members contributing at each sample point


@dataclass
class Ensemble:
    eps: float
    d: float
    runs: list
    profiles: dict  # name -> AveragedProfile

    @property
    def n_samples(self):
        return len(self.runs)

    def manifest(self):
        """Plain-text manifest: one line per member plus the ensemble header."""
        lines = [f"ensemble eps={self.eps!r} d={self.d!r} n_samples={self.n_samples}",
                 "sections=" + ",".join(self.profiles)]
        for r in self.runs:
            i = r.info
            lines.append(
                f"member shift={r.shift!r} ndof={i['ndof']} residual={i['residual']:.3e} "
                f"snapped={i['snapped']} wrapped={i['wrapped']} bottom_flux={i['bottom_flux']:.3e} "
                f"obstacle_trace={i['obstacle_trace']:.1e} seconds={i['seconds']:.2f}")
        return "\n".join(lines) + "\n"


def solve_pore_scale(eps=0.05, d=0.5, shift=0.0, lid_velocity=1.0, h_pm=None, h_ff=None,
                     circle_segments=None, mesh=None):
    """Stokes in the perforated cavity: lid on top, no-slip walls/obstacles, do-nothing bottom."""
    t0 = time.perf_counter()
    mesh = mesh or build_perforated_domain(eps, d, shift, h_pm=h_pm, h_ff=h_ff,
                                           circle_segments=circle_segments)
    V, Q = P2vec(mesh), P1(mesh)
    n = V.n_nodes
    x = V.node_coords
    x0, x1 = mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max()
    top = V.boundary_nodes("top")
    lid = top[(np.abs(x[top, 0] - x0) > 1e-12) & (np.abs(x[top, 0] - x1) > 1e-12)]
    walls = np.setdiff1d(V.boundary_nodes("left", "right", "obstacle"), lid)
    cs = ConstraintSet(V.ndof + Q.ndof)
    cs.dirichlet(np.concatenate([walls, walls + n, lid + n]), 0.0)
    cs.dirichlet(lid, lid_velocity)
    system = assemble_stokes(mesh, V, Q, constraints=cs)
    sol = solve(system)
    v, p = sol["velocity"], sol["pressure"]
    ob = V.boundary_nodes("obstacle")
    es = EdgeSet.from_edges(mesh, mesh.tagged("bottom"))
    phi, _, _, wl = edge_tabulate(V, es, 5)
    v2 = v.components()[1][V.cell_nodes[es.cells]]
    info = {"ndof": V.ndof + Q.ndof, "residual": sol.residual,
            "snapped": int(getattr(mesh, "_snapped", 0)),
            "wrapped": int(len(mesh.circles) - _full_circles(mesh)),
            "obstacle_trace": float(max(np.abs(v.values[ob]).max(initial=0.0),
                                        np.abs(v.values[ob + n]).max(initial=0.0))),
            "bottom_flux": float(np.einsum("eq,eqa,ea->", wl, phi, v2)),
            "seconds": time.perf_counter() - t0}
    return PoreScaleRun(float(shift), mesh, v, p, info)


def _full_circles(mesh):
    c = mesh.circles
    if not len(c):
        return 0
    x0, x1 = mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max()
    return int(((c[:, 0] - c[:, 2] >= x0 - 1e-12) & (c[:, 0] + c[:, 2] <= x1 + 1e-12)).sum())


def average_runs(runs, names=None):
    """Pointwise mean over members, ignoring masked samples.

    Member values are sorted at each point before summation, so the mean is
    bitwise independent of member order.
    """
    names = names or list(runs[0].profiles)
    out = {}
    for name in names:
        pv = [r.profiles[name][0] for r in runs]
        pp = [r.profiles[name][1] for r in runs]
        masks = np.array([q.mask for q in pv])
        count = masks.sum(axis=0)
        V = np.array([np.where(q.mask[:, None], q.values, 0.0) for q in pv])
        P = np.array([np.where(q.mask, q.values, 0.0) for q in pp])
        with np.errstate(invalid="ignore", divide="ignore"):
            sv, sp_ = np.sort(V, axis=0).sum(axis=0), np.sort(P, axis=0).sum(axis=0)
            v = np.where(count[:, None] > 0, sv / count[:, None], np.nan)
            p = np.where(count > 0, sp_ / count, np.nan)
        out[name] = AveragedProfile(pv[0].s, pv[0].points, v, p, count)
    return out


def _member(eps, d, shift, cross_sections, n_points, keep_fields, solver_args):
    try:
        run = solve_pore_scale(eps, d, shift, **solver_args)
        run.sample(cross_sections, n_points)
    except Exception as exc:
        raise RuntimeError(f"ensemble member with shift {shift!r} failed: {exc}") from exc
    if not keep_fields:
        run.release()
    return run


def ensemble_average(eps=0.05, d=0.5, n_samples=16, cross_sections=None, n_points=400,
                     keep_fields=False, workers=1, **solver_args):
    """Members at shifts k/n_samples (in units of eps), averaged on each cross-section.

    workers > 1 solves members in a process pool; the reduction always runs in
    member order, so the average does not depend on scheduling.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    cross_sections = cross_sections or CROSS_SECTIONS
    shifts = [k / n_samples for k in range(n_samples)]
    args = [(eps, d, s, cross_sections, n_points, keep_fields and workers <= 1, solver_args)
            for s in shifts]
    if workers > 1 and n_samples > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(workers, n_samples)) as ex:
            runs = list(ex.map(_member, *zip(*args)))
    else:
        runs = []
        for k, a in enumerate(args):
            runs.append(_member(*a))
            log.info("member %d/%d shift=%.4f ndof=%d %.1fs", k + 1, n_samples, shifts[k],
                     runs[-1].info["ndof"], runs[-1].info["seconds"])
    return Ensemble(eps, d, runs, average_runs(runs, list(cross_sections)))


def total_variation(values):
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    return float(np.abs(np.diff(v)).sum())
