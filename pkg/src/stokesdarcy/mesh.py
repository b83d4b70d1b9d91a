"""Triangle meshes for the unit cell, the boundary-layer stripe, the perforated
pore-scale domain and plain rectangles.

All meshes come from a constrained Delaunay triangulation of a polygonal
boundary whose segments are pre-subdivided; Steiner points on the boundary are
switched off, so opposite periodic sides carry identical vertex rows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import triangle

log = logging.getLogger(__name__)

TAGS = ("obstacle", "top", "bottom", "left", "right", "interface_S")
_MARKER = {t: i + 1 for i, t in enumerate(TAGS)}
_INTERNAL = 99

FREE, POROUS = 0, 1


class MeshError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeometrySpec:
    kind: str
    d: float = 0.5
    m: int = 4
    eps: float = 1.0 / 20
    shift: float = 0.0
    bounds: tuple = (0.0, 1.0, -0.5, 0.5)
    circle_segments: int | None = None

    def __post_init__(self):
        if self.kind not in ("unit_cell", "stripe", "perforated", "rectangle"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.kind != "rectangle" and not 0.0 < self.d < 1.0:
            raise ValueError(f"inclusion diameter must lie in (0, 1), got {self.d}")
        if self.m < 1:
            raise ValueError("stripe height m must be >= 1")
        if self.circle_segments is not None and self.circle_segments < 16:
            raise ValueError("circle_segments must be >= 16")
        if self.kind == "perforated":
            x0, x1, y0, _ = self.bounds
            for length in (x1 - x0, -y0):
                n = length / self.eps
                if abs(n - round(n)) > 1e-9:
                    raise ValueError("porous block must hold an integer number of cells")


@dataclass(frozen=True)
class PeriodicMap:
    """Vertex identification across two opposite sides; pairs are (master, slave)."""

    direction: str
    pairs: np.ndarray

    def check(self, vertices, tol=1e-12):
        axis = 1 if self.direction == "x1" else 0
        m, s = self.pairs[:, 0], self.pairs[:, 1]
        if len(np.unique(m)) != len(m) or len(np.unique(s)) != len(s):
            raise MeshError(f"periodic map {self.direction} is not a bijection")
        err = np.abs(vertices[m, axis] - vertices[s, axis]).max(initial=0.0)
        if err > tol:
            raise MeshError(f"periodic pairs {self.direction} mismatch by {err:.3e}")
        back = dict(zip(s, m))
        fwd = dict(zip(m, s))
        if any(back[fwd[v]] != v for v in m):
            raise MeshError("periodic map does not compose to identity")


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    edge_tags: dict
    periodic: tuple = ()
    regions: np.ndarray | None = None
    circles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    interface_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))

    def __post_init__(self):
        if self.regions is None:
            object.__setattr__(self, "regions", np.zeros(len(self.triangles), int))
        for arr in (self.vertices, self.triangles, self.regions, self.circles,
                    self.interface_pairs, *self.edge_tags.values(),
                    *(p.pairs for p in self.periodic)):
            arr.flags.writeable = False

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def periodic_pairs(self, direction=None):
        maps = [p for p in self.periodic if direction in (None, p.direction)]
        if not maps:
            return np.zeros((0, 2), int)
        return np.vstack([p.pairs for p in maps])

    def signed_areas(self):
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def area(self, region=None):
        a = self.signed_areas()
        if region is not None:
            a = a[self.regions == region]
        return float(a.sum())

    def edges(self):
        """Unique undirected edges (sorted pairs) and the triangle->edge map."""
        t = self.triangles
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 3)

    def boundary_edges(self):
        uniq, t2e = self.edges()
        counts = np.bincount(t2e.ravel(), minlength=len(uniq))
        if counts.max() > 2:
            raise MeshError("non-manifold edge shared by more than two triangles")
        return uniq[counts == 1]

    def tagged(self, tag):
        return self.edge_tags.get(tag, np.zeros((0, 2), int))

    def hmax(self):
        p = self.vertices[self.edges()[0]]
        return float(np.linalg.norm(p[:, 1] - p[:, 0], axis=1).max())

    def validate(self):
        if (self.signed_areas() <= 0).any():
            raise MeshError("triangle with non-positive orientation")
        bnd = {tuple(e) for e in self.boundary_edges()}
        seen = {}
        for tag, e in self.edge_tags.items():
            for a, b in np.sort(e, axis=1):
                if (a, b) in seen:
                    raise MeshError(f"edge {(a, b)} tagged twice ({seen[(a, b)]}, {tag})")
                seen[(a, b)] = tag
        missing = bnd - set(seen)
        extra = set(seen) - bnd
        if missing:
            raise MeshError(f"{len(missing)} boundary edges carry no tag")
        if extra:
            raise MeshError(f"{len(extra)} tagged edges are not boundary edges")
        for p in self.periodic:
            p.check(self.vertices)
        if len(self.interface_pairs):
            v = self.vertices
            err = np.abs(v[self.interface_pairs[:, 0]] - v[self.interface_pairs[:, 1]]).max()
            if err > 1e-12:
                raise MeshError("interface vertex rows do not coincide")
        return self

    def euler_characteristic(self):
        return self.n_vertices - len(self.edges()[0]) + self.n_triangles


# ---------------------------------------------------------------------------
# polygon helpers


def _subdivide(a, b, h):
    """Points from a to b (a included, b excluded) with spacing about h."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / h - 1e-9)))
    t = np.arange(n) / n
    pts = a + t[:, None] * (b - a)
    # keep axis-aligned coordinates exact
    for k in range(2):
        if a[k] == b[k]:
            pts[:, k] = a[k]
    return pts


def default_circle_segments(diameter, h):
    n = int(math.ceil(math.pi * diameter / h))
    return max(16, 4 * int(math.ceil(n / 4)))


def _circle(cx, cy, r, n):
    th = 2 * np.pi * np.arange(n) / n
    return np.column_stack([cx + r * np.cos(th), cy + r * np.sin(th)])


class _PSLG:
    def __init__(self):
        self.pts = []
        self.segs = []
        self.marks = []
        self.holes = []
        self.regions = []

    def chain(self, points, markers, closed=True):
        start = len(self.pts)
        self.pts.extend(map(tuple, points))
        n = len(points)
        for i in range(n if closed else n - 1):
            j = (i + 1) % n if closed else i + 1
            self.segs.append((start + i, start + j))
            self.marks.append(markers[i] if np.ndim(markers) else markers)
        return start

    def triangulate(self, max_area, dump=""):
        data = dict(vertices=np.array(self.pts, float), segments=np.array(self.segs, int),
                    segment_markers=np.array(self.marks, int))
        if self.holes:
            data["holes"] = np.array(self.holes, float)
        flags = "pq28Q"
        if self.regions:
            data["regions"] = np.array(self.regions, float)
            flags += "Aa"
        else:
            flags += f"a{max_area:.12f}"
        flags += "Y"
        try:
            out = triangle.triangulate(data, flags)
        except Exception as exc:  # pragma: no cover - library failure path
            raise MeshError(f"triangulation failed: {exc}; geometry: {dump} "
                            f"{len(self.pts)} points, {len(self.segs)} segments") from exc
        if "triangles" not in out or len(out["triangles"]) == 0:
            raise MeshError(f"triangulation produced no triangles; geometry: {dump}")
        return out


def _from_triangle(out, with_regions=False):
    v = np.asarray(out["vertices"], float)
    t = np.asarray(out["triangles"], int)
    p = v[t]
    ar = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    t = np.where((ar < 0)[:, None], t[:, [0, 2, 1]], t)
    # drop vertices not referenced by any triangle (e.g. hole seeds)
    used = np.zeros(len(v), bool)
    used[t.ravel()] = True
    newid = np.cumsum(used) - 1
    v, t = v[used], newid[t]
    segs = newid[np.asarray(out["segments"], int)]
    marks = np.asarray(out["segment_markers"], int).ravel()
    tags = {}
    for tag, mk in _MARKER.items():
        sel = segs[marks == mk]
        if len(sel):
            tags[tag] = sel
    regions = None
    if with_regions:
        regions = np.rint(np.asarray(out["triangle_attributes"]).ravel()).astype(int)
    return v, t, tags, regions


def _pair_rows(vertices, ia, ib, axis, tol=1e-9):
    """Pair vertex sets ia, ib by their coordinate along `axis`."""
    ka = vertices[ia, axis]
    kb = vertices[ib, axis]
    oa, ob = np.argsort(ka), np.argsort(kb)
    if len(ia) != len(ib) or np.abs(ka[oa] - kb[ob]).max(initial=0) > tol:
        raise MeshError("opposite sides do not carry matching vertex rows")
    return np.column_stack([np.asarray(ia)[oa], np.asarray(ib)[ob]])


def _on_line(vertices, axis, value, tol=1e-12):
    return np.flatnonzero(np.abs(vertices[:, axis] - value) < tol)


def _snap_rows(vertices, ia, ib, axis):
    """Make paired coordinates bit-identical along `axis`."""
    v = vertices.copy()
    v[ib, axis] = v[ia, axis]
    return v


# ---------------------------------------------------------------------------
# unit cell


def build_unit_cell(d, h, circle_segments=None):
    """Triangulate Y_f = (0,1)^2 minus the centered disc of diameter d."""
    GeometrySpec("unit_cell", d=d, circle_segments=circle_segments)
    if h <= 0:
        raise ValueError("mesh size must be positive")
    nc = circle_segments or default_circle_segments(d, h)
    g = _PSLG()
    xs = _subdivide((0, 0), (1, 0), h)[:, 0]
    n = len(xs)
    ring = np.vstack([
        np.column_stack([xs, np.zeros(n)]),
        np.column_stack([np.ones(n), xs]),
        np.column_stack([1 - xs, np.ones(n)]),
        np.column_stack([np.zeros(n), 1 - xs]),
    ])
    g.chain(ring, [_MARKER["bottom"]] * n + [_MARKER["right"]] * n
            + [_MARKER["top"]] * n + [_MARKER["left"]] * n)
    g.chain(_circle(0.5, 0.5, d / 2, nc), _MARKER["obstacle"])
    g.holes.append((0.5, 0.5))
    out = g.triangulate(0.5 * h * h, dump=f"unit cell d={d} h={h} segments={nc}")
    v, t, tags, _ = _from_triangle(out)
    left, right = _on_line(v, 0, 0.0), _on_line(v, 0, 1.0)
    bot, top = _on_line(v, 1, 0.0), _on_line(v, 1, 1.0)
    px = _pair_rows(v, left, right, 1)
    py = _pair_rows(v, bot, top, 0)
    v = _snap_rows(_snap_rows(v, px[:, 0], px[:, 1], 1), py[:, 0], py[:, 1], 0)
    mesh = TriMesh(v, t, tags, (PeriodicMap("x1", px), PeriodicMap("x2", py)),
                   circles=np.array([[0.5, 0.5, d / 2]]))
    return mesh.validate()


# ---------------------------------------------------------------------------
# stripe


def _merge_vertices(v, t, tol_digits=12):
    key = {}
    newid = np.empty(len(v), int)
    keep = []
    for i, p in enumerate(np.round(v, tol_digits)):
        k = (p[0] + 0.0, p[1] + 0.0)
        if k not in key:
            key[k] = len(keep)
            keep.append(i)
        newid[i] = key[k]
    return v[keep], newid


def build_stripe(m, d, h, circle_segments=None, h_far=None, cell=None):
    """Cut-off boundary-layer stripe (0,1)x(-m,m) with m inclusions below S.

    The lower half stacks m copies of the unit-cell mesh; the upper half is a
    separate triangulation whose bottom row duplicates the cell's top row, so
    S carries two coincident vertex rows (interface_pairs = (minus, plus)).
    """
    GeometrySpec("stripe", d=d, m=m, circle_segments=circle_segments)
    cell = cell or build_unit_cell(d, h, circle_segments)
    cv, ct = cell.vertices, cell.triangles
    nv = len(cv)
    verts = np.vstack([cv - [0.0, k] for k in range(1, m + 1)])
    tris = np.vstack([ct + nv * (k - 1) for k in range(1, m + 1)])
    circles = np.array([[0.5, 0.5 - k, d / 2] for k in range(1, m + 1)])
    verts, newid = _merge_vertices(verts, tris)
    tris = newid[tris]
    low_tags = {"obstacle": [], "left": [], "right": []}
    for k in range(1, m + 1):
        off = nv * (k - 1)
        for tag in low_tags:
            low_tags[tag].append(newid[cell.tagged(tag) + off])
    low_tags = {k: np.vstack(e) for k, e in low_tags.items()}
    low_tags["bottom"] = newid[cell.tagged("bottom") + nv * (m - 1)]
    low_tags["interface_S"] = newid[cell.tagged("top")]

    # upper half, optionally coarsened band by band away from S
    h_far = max(h_far or h, h)

    def band_h(k):
        return min(h * (1.0 + 0.5 * k), h_far)

    xs = np.sort(cv[_on_line(cv, 1, 1.0), 0])[:-1]
    ys = np.concatenate([_subdivide((0, k), (0, k + 1), band_h(k))[:, 1] for k in range(m)]
                        + [[float(m)]])
    n_top = max(1, int(math.ceil(1.0 / band_h(m - 1) - 1e-9)))
    xt = np.arange(n_top + 1) / n_top
    ny = len(ys) - 1
    ring = np.vstack([
        np.column_stack([xs, np.zeros_like(xs)]),
        np.column_stack([np.ones(ny), ys[:-1]]),
        np.column_stack([xt[::-1][:-1], np.full(n_top, float(m))]),
        np.column_stack([np.zeros(ny), ys[::-1][:-1]]),
    ])
    marks = ([_MARKER["interface_S"]] * len(xs) + [_MARKER["right"]] * ny
             + [_MARKER["top"]] * n_top + [_MARKER["left"]] * ny)
    g = _PSLG()
    g.chain(ring, marks)
    if h_far > h:
        index = {(float(x), float(y)): i for i, (x, y) in enumerate(ring)}
        for k in range(1, m):
            g.segs.append((index[(0.0, float(k))], index[(1.0, float(k))]))
            g.marks.append(_INTERNAL)
        for k in range(m):
            g.regions.append((0.5, k + 0.5, FREE, 0.5 * band_h(k) ** 2))
    out = g.triangulate(0.5 * h * h, dump=f"stripe upper m={m} h={h}")
    uv, ut, utags, _ = _from_triangle(out)

    off = len(verts)
    V = np.vstack([verts, uv])
    T = np.vstack([tris, ut + off])
    regions = np.concatenate([np.full(len(tris), POROUS), np.full(len(ut), FREE)])
    tags = {}
    for tag in ("obstacle", "bottom"):
        tags[tag] = low_tags[tag]
    tags["top"] = utags["top"] + off
    tags["left"] = np.vstack([low_tags["left"], utags["left"] + off])
    tags["right"] = np.vstack([low_tags["right"], utags["right"] + off])
    tags["interface_S"] = np.vstack([low_tags["interface_S"], utags["interface_S"] + off])

    s_minus = np.unique(low_tags["interface_S"])
    s_plus = np.unique(utags["interface_S"]) + off
    ip = _pair_rows(V, s_minus, s_plus, 0, tol=1e-12)
    left, right = _on_line(V, 0, 0.0), _on_line(V, 0, 1.0)
    px = _pair_rows_2(V, left, right)
    V = _snap_rows(V, px[:, 0], px[:, 1], 1)
    mesh = TriMesh(V, T, tags, (PeriodicMap("x1", px),), regions, circles, ip)
    return mesh.validate()


def _pair_rows_2(vertices, ia, ib, tol=1e-9):
    """Pair left/right vertices by y, keeping duplicated S rows apart.

    On S both the minus and plus rows sit at y=0, so the pairing also keys on
    which half-stripe a vertex belongs to (decided from its incident triangles
    by the caller through vertex order: lower vertices come first).
    """
    ka = np.round(vertices[ia, 1] / tol).astype(np.int64)
    kb = np.round(vertices[ib, 1] / tol).astype(np.int64)
    pairs = []
    used = {}
    for k, i in sorted(zip(kb, ib)):
        used.setdefault(k, []).append(i)
    for k, i in sorted(zip(ka, ia)):
        if k not in used or not used[k]:
            raise MeshError("lateral sides do not carry matching vertex rows")
        pairs.append((i, used[k].pop(0)))
    if any(used.values()):
        raise MeshError("lateral sides do not carry matching vertex rows")
    return np.array(pairs, int)


# ---------------------------------------------------------------------------
# rectangles


def build_rectangle(bounds, h, structured=False, tags=None):
    """Mesh of an axis-aligned rectangle; sides tagged bottom/right/top/left."""
    x0, x1, y0, y1 = bounds
    nx = max(1, int(math.ceil((x1 - x0) / h - 1e-9)))
    ny = max(1, int(math.ceil((y1 - y0) / h - 1e-9)))
    names = tags or {}
    name = {k: names.get(k, k) for k in ("bottom", "right", "top", "left")}
    if structured:
        xs = np.linspace(x0, x1, nx + 1)
        ys = np.linspace(y0, y1, ny + 1)
        X, Y = np.meshgrid(xs, ys)
        v = np.column_stack([X.ravel(), Y.ravel()])
        idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
        a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
        c, dd = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
        t = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, dd])])
        etags = {
            name["bottom"]: np.column_stack([idx[0, :-1], idx[0, 1:]]),
            name["right"]: np.column_stack([idx[:-1, -1], idx[1:, -1]]),
            name["top"]: np.column_stack([idx[-1, 1:], idx[-1, :-1]]),
            name["left"]: np.column_stack([idx[1:, 0], idx[:-1, 0]]),
        }
        return TriMesh(v, t, etags).validate()
    ex = np.linspace(x0, x1, nx + 1)[:-1]
    ey = np.linspace(y0, y1, ny + 1)[:-1]
    ring = np.vstack([
        np.column_stack([ex, np.full(nx, y0)]),
        np.column_stack([np.full(ny, x1), ey]),
        np.column_stack([x1 + x0 - ex, np.full(nx, y1)]),
        np.column_stack([np.full(ny, x0), y1 + y0 - ey]),
    ])
    g = _PSLG()
    g.chain(ring, [_MARKER["bottom"]] * nx + [_MARKER["right"]] * ny
            + [_MARKER["top"]] * nx + [_MARKER["left"]] * ny)
    out = g.triangulate(0.5 * h * h, dump=f"rectangle {bounds} h={h}")
    v, t, etags, _ = _from_triangle(out)
    etags = {name[k]: e for k, e in etags.items()}
    return TriMesh(v, t, etags).validate()


# ---------------------------------------------------------------------------
# perforated pore-scale domain


def inclusion_centers(eps, d, shift, bounds, snap=0.25):
    """Disc centers of the shifted porous lattice, wrapped into [x0, x1).

    A disc whose distance to a lateral wall (gap or overlap) is below
    snap*radius is moved horizontally until it equals snap*radius, so that no
    near-tangent slivers reach the mesher.  Returns (centers, snapped count).
    """
    x0, x1, y0, _ = bounds
    L = x1 - x0
    ncol = int(round(L / eps))
    nrow = int(round(-y0 / eps))
    r = 0.5 * d * eps
    delta = snap * r
    cx = x0 + np.mod((np.arange(ncol) + 0.5 + shift) * eps, L)
    cx = np.round(cx, 12)
    cx[cx >= x1] -= L
    snapped = 0
    for i, c in enumerate(cx):
        for wall, sign in ((x1, 1.0), (x0, -1.0)):
            g = sign * (wall - c) - r  # >0: gap, <0: overlap
            if abs(g) < delta:
                target = delta if g >= 0 else -delta
                cx[i] = c + sign * (g - target)
                snapped += 1
    centers = [(c, -(k + 0.5) * eps) for k in range(nrow) for c in cx]
    centers.sort(key=lambda p: (round(p[1], 12), round(p[0], 12)))
    return np.array(centers), snapped


def _notch(cx, cy, r, n, wall, side, tol):
    """Arc of the disc that lies inside the domain, between its wall hits.

    side='right': wall at x=wall, domain on x<wall, arc ordered bottom->top.
    side='left': domain on x>wall, arc ordered top->bottom.
    """
    c = (wall - cx) / r
    th0 = math.acos(np.clip(c, -1.0, 1.0))
    grid = 2 * np.pi * np.arange(n) / n
    dth = 2 * np.pi / n
    if side == "right":
        # inside: theta in (th0, 2pi - th0), traverse decreasing from 2pi-th0
        sel = grid[(grid > th0 + 0.3 * dth) & (grid < 2 * np.pi - th0 - 0.3 * dth)][::-1]
        start = (wall, cy - r * math.sin(th0))
        end = (wall, cy + r * math.sin(th0))
    else:
        # inside: theta in (-th0, th0), traverse decreasing
        g2 = np.where(grid > np.pi, grid - 2 * np.pi, grid)
        sel = np.sort(g2[(g2 > -th0 + 0.3 * dth) & (g2 < th0 - 0.3 * dth)])[::-1]
        start = (wall, cy + r * math.sin(th0))
        end = (wall, cy - r * math.sin(th0))
    arc = np.column_stack([cx + r * np.cos(sel), cy + r * np.sin(sel)])
    return np.array(start), arc, np.array(end)


def build_perforated_domain(eps, d, shift, bounds=(0.0, 1.0, -0.5, 0.5), h_pm=None,
                            h_ff=None, circle_segments=None, snap=0.25):
    """Lid-cavity pore-scale domain: free block above y=0, perforated block below.

    Inclusions of diameter d*eps sit at the porous cell centers shifted by
    shift*eps, wrapped periodically in x1 and clipped at the lateral walls.
    Triangles carry region FREE (y>0) or POROUS (y<0); y=0 is a mesh line.
    """
    GeometrySpec("perforated", d=d, eps=eps, shift=shift, bounds=bounds,
                 circle_segments=circle_segments)
    if not np.isfinite(shift):
        raise ValueError("shift must be finite")
    x0, x1, y0, y1 = bounds
    r = 0.5 * d * eps
    h_pm = h_pm or 0.2 * eps
    h_ff = h_ff or 4 * h_pm
    nc = circle_segments or default_circle_segments(2 * r, 0.6 * h_pm)
    centers, snapped = inclusion_centers(eps, d, shift, bounds, snap)
    tol = 1e-12
    full, right_n, left_n = [], [], []
    for cx, cy in centers:
        if cx + r > x1 + tol:
            right_n.append((cx, cy))
            left_n.append((cx - (x1 - x0), cy))
        elif cx - r < x0 - tol:
            left_n.append((cx, cy))
            right_n.append((cx + (x1 - x0), cy))
        else:
            full.append((cx, cy))
    right_n.sort(key=lambda p: p[1])
    left_n.sort(key=lambda p: -p[1])

    def wall_path(x, ya, yb, notches, side, h):
        pts, mk = [], []
        y = ya
        for cx, cy in notches:
            start, arc, end = _notch(cx, cy, r, nc, x, side, tol)
            seg = _subdivide((x, y), start, h)
            pts += list(seg)
            mk += ["wall"] * len(seg)
            pts.append(start)
            mk.append("obstacle")
            pts += list(arc)
            mk += ["obstacle"] * len(arc)
            y = end[1]
        seg = _subdivide((x, y), (x, yb), h)
        pts += list(seg)
        mk += ["wall"] * len(seg)
        return pts, mk

    # exterior ring, counterclockwise
    pts, mk = [], []
    seg = _subdivide((x0, y0), (x1, y0), h_pm)
    pts += list(seg); mk += ["bottom"] * len(seg)
    a, b = wall_path(x1, y0, 0.0, right_n, "right", h_pm)
    pts += a; mk += [m_ if m_ != "wall" else "right" for m_ in b]
    seg = _subdivide((x1, 0.0), (x1, y1), h_ff)
    pts += list(seg); mk += ["right"] * len(seg)
    seg = _subdivide((x1, y1), (x0, y1), h_ff)
    pts += list(seg); mk += ["top"] * len(seg)
    seg = _subdivide((x0, y1), (x0, 0.0), h_ff)
    pts += list(seg); mk += ["left"] * len(seg)
    a, b = wall_path(x0, 0.0, y0, left_n, "left", h_pm)
    pts += a; mk += [m_ if m_ != "wall" else "left" for m_ in b]

    g = _PSLG()
    g.chain(np.array(pts), [_MARKER[k] for k in mk])
    sig = _subdivide((x0, 0.0), (x1, 0.0), h_pm)[1:]
    # the internal interface line reuses the ring vertices at its endpoints
    ring_idx = {(float(p[0]), float(p[1])): i for i, p in enumerate(pts)}
    left_end, right_end = ring_idx[(x0, 0.0)], ring_idx[(x1, 0.0)]
    start = len(g.pts)
    g.pts.extend(map(tuple, sig))
    chain = [left_end] + list(range(start, start + len(sig))) + [right_end]
    for i in range(len(chain) - 1):
        g.segs.append((chain[i], chain[i + 1]))
        g.marks.append(_INTERNAL)
    for cx, cy in full:
        g.chain(_circle(cx, cy, r, nc), _MARKER["obstacle"])
        g.holes.append((cx, cy))
    a_ff = 0.5 * h_ff * h_ff
    a_pm = 0.5 * h_pm * h_pm
    g.regions.append((0.5 * (x0 + x1), 0.5 * y1, FREE, a_ff))
    g.regions.append((0.5 * (x0 + x1) + 0.5 * eps * shift, -0.25 * (1 - d) * eps, POROUS, a_pm))
    out = g.triangulate(a_pm, dump=f"perforated eps={eps} d={d} shift={shift}")
    v, t, tags, regions = _from_triangle(out, with_regions=True)
    circles = np.array([(cx, cy, r) for cx, cy in list(full) + right_n + left_n])
    mesh = TriMesh(v, t, tags, (), regions, circles)
    object.__setattr__(mesh, "_snapped", snapped)
    log.debug("perforated mesh shift=%.4f: %d vertices, %d triangles, %d snapped",
              shift, mesh.n_vertices, mesh.n_triangles, snapped)
    return mesh.validate()


# ---------------------------------------------------------------------------
# refinement


def refine(mesh: TriMesh, factor=2):
    """Uniform red refinement; obstacle midpoints are projected to their circle."""
    if factor not in (2, 4):
        raise ValueError("refinement factor must be 2 or 4")
    if factor == 4:
        return refine(refine(mesh, 2), 2)
    edges, t2e = mesh.edges()
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    for k in (0, 1):
        same = mesh.vertices[edges[:, 0], k] == mesh.vertices[edges[:, 1], k]
        mid[same, k] = mesh.vertices[edges[same, 0], k]
    eid = {tuple(e): i for i, e in enumerate(edges)}

    def edge_index(a, b):
        return np.array([eid[(min(x, y), max(x, y))] for x, y in zip(a, b)], int)

    obst = mesh.tagged("obstacle")
    if len(obst) and len(mesh.circles):
        ids = edge_index(obst[:, 0], obst[:, 1])
        p = mid[ids]
        c = mesh.circles
        dist = np.linalg.norm(p[:, None, :] - c[None, :, :2], axis=2) - c[None, :, 2]
        k = np.abs(dist).argmin(axis=1)
        dirv = p - c[k, :2]
        mid[ids] = c[k, :2] + c[k, 2:3] * dirv / np.linalg.norm(dirv, axis=1)[:, None]
    V = np.vstack([mesh.vertices, mid])
    t = mesh.triangles
    m01, m12, m20 = nv + t2e[:, 0], nv + t2e[:, 1], nv + t2e[:, 2]
    T = np.vstack([
        np.column_stack([t[:, 0], m01, m20]),
        np.column_stack([t[:, 1], m12, m01]),
        np.column_stack([t[:, 2], m20, m12]),
        np.column_stack([m01, m12, m20]),
    ])
    regions = np.tile(mesh.regions, 4)
    tags = {}
    for tag, e in mesh.edge_tags.items():
        mids = nv + edge_index(e[:, 0], e[:, 1])
        tags[tag] = np.vstack([np.column_stack([e[:, 0], mids]), np.column_stack([mids, e[:, 1]])])

    per = []
    for pm in mesh.periodic:
        table = dict(map(tuple, pm.pairs))
        new = [pm.pairs]
        for a, b in edges:
            if a in table and b in table:
                sa, sb = table[a], table[b]
                key = (min(sa, sb), max(sa, sb))
                if key in eid and key != (min(a, b), max(a, b)):
                    new.append(np.array([[nv + eid[(a, b)], nv + eid[key]]]))
        per.append(PeriodicMap(pm.direction, np.vstack(new).astype(int)))
    ip = mesh.interface_pairs
    if len(ip):
        table = dict(map(tuple, ip))
        new = [ip]
        for a, b in mesh.tagged("interface_S"):
            if a in table and b in table:
                key = (min(table[a], table[b]), max(table[a], table[b]))
                new.append(np.array([[nv + eid[(min(a, b), max(a, b))], nv + eid[key]]]))
        ip = np.vstack(new).astype(int)
    out = TriMesh(V, T, tags, tuple(per), regions, mesh.circles.copy(), ip)
    return out.validate()


# ---------------------------------------------------------------------------
# text format


def write_trimesh(mesh: TriMesh, path):
    with open(path, "w") as f:
        f.write("TRIMESH 2\n")
        f.write(f"VERTICES {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r}\n")
        f.write(f"TRIANGLES {mesh.n_triangles}\n")
        for (a, b, c), r in zip(mesh.triangles, mesh.regions):
            f.write(f"{a} {b} {c} {r}\n")
        n = sum(len(e) for e in mesh.edge_tags.values())
        f.write(f"EDGES {n}\n")
        for tag, e in mesh.edge_tags.items():
            for a, b in e:
                f.write(f"{a} {b} {tag}\n")
        pairs = [(p.direction, a, b) for p in mesh.periodic for a, b in p.pairs]
        f.write(f"PERIODIC {len(pairs)}\n")
        for dname, a, b in pairs:
            f.write(f"{dname} {a} {b}\n")
        f.write(f"INTERFACE {len(mesh.interface_pairs)}\n")
        for a, b in mesh.interface_pairs:
            f.write(f"{a} {b}\n")
        f.write(f"CIRCLES {len(mesh.circles)}\n")
        for cx, cy, r in mesh.circles:
            f.write(f"{float(cx)!r} {float(cy)!r} {float(r)!r}\n")


def read_trimesh(path) -> TriMesh:
    with open(path) as f:
        lines = [ln.split() for ln in f if ln.strip()]
    if lines[0] != ["TRIMESH", "2"]:
        raise MeshError("not a TRIMESH 2 file")
    pos = 1

    def block(name):
        nonlocal pos
        if pos >= len(lines) or lines[pos][0] != name:
            return []
        n = int(lines[pos][1])
        rows = lines[pos + 1:pos + 1 + n]
        pos += 1 + n
        return rows

    v = np.array([[float(a) for a in r] for r in block("VERTICES")])
    tr = np.array([[int(a) for a in r] for r in block("TRIANGLES")], int)
    tags = {}
    for a, b, tag in block("EDGES"):
        tags.setdefault(tag, []).append((int(a), int(b)))
    tags = {k: np.array(e, int) for k, e in tags.items()}
    per = {}
    for dname, a, b in block("PERIODIC"):
        per.setdefault(dname, []).append((int(a), int(b)))
    ip = np.array([[int(a) for a in r] for r in block("INTERFACE")], int).reshape(-1, 2)
    circ = np.array([[float(a) for a in r] for r in block("CIRCLES")]).reshape(-1, 3)
    periodic = tuple(PeriodicMap(k, np.array(p, int)) for k, p in per.items())
    return TriMesh(v, tr[:, :3], tags, periodic, tr[:, 3].copy(), circ, ip)
