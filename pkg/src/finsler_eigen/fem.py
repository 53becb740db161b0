"""Triangular meshes of convex polygons and piecewise-linear fields."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

from .anisotropy import NormSpec
from .convexgeom import ConvexPolygon
from .errors import ConfigError

MIN_ANGLE_DEG = 20.0
MAX_EDGE_FACTOR = 1.5
SHARP_CORNER = math.radians(60.0)

# 7-point degree-5 rule on the reference triangle: barycentric points and weights
_A1, _B1, _W1 = 0.059715871789770, 0.470142064105115, 0.132394152788506
_A2, _B2, _W2 = 0.797426985353087, 0.101286507323456, 0.125939180544827
QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUAD_WEIGHTS = np.array([0.225, _W1, _W1, _W1, _W2, _W2, _W2])


@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    target_h: float
    domain: ConvexPolygon | None = None

    def __post_init__(self):
        for a in (self.nodes, self.triangles, self.boundary_nodes):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_cells(self):
        return len(self.triangles)

    @cached_property
    def corners(self):
        """Vertex coordinates, shape (cells, 3, 2)."""
        return self.nodes[self.triangles]

    @cached_property
    def signed_areas(self):
        p = self.corners
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def areas(self):
        return self.signed_areas

    @cached_property
    def total_area(self):
        return float(self.areas.sum())

    @cached_property
    def shape_gradients(self):
        """Gradients of the three hat functions on each cell, shape (cells, 3, 2)."""
        p = self.corners
        rot = np.stack([p[:, [1, 2, 0], 1] - p[:, [2, 0, 1], 1],
                        p[:, [2, 0, 1], 0] - p[:, [1, 2, 0], 0]], axis=-1)
        return rot / (2.0 * self.areas[:, None, None])

    @cached_property
    def gradient_operator(self):
        """Sparse (2*cells, nodes) matrix; rows 2k, 2k+1 give the gradient on cell k."""
        g = self.shape_gradients
        rows = (2 * np.arange(self.n_cells)[:, None, None] + np.arange(2)[None, None, :])
        rows = np.broadcast_to(rows, g.shape)
        cols = np.broadcast_to(self.triangles[:, :, None], g.shape)
        return sp.csr_matrix((g.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(2 * self.n_cells, self.n_nodes))

    @cached_property
    def quadrature(self):
        """(interpolation matrix (7*cells, nodes), weights (7*cells,))."""
        q = len(QUAD_WEIGHTS)
        rows = np.arange(self.n_cells * q).reshape(self.n_cells, q)
        rows = np.broadcast_to(rows[:, :, None], (self.n_cells, q, 3))
        cols = np.broadcast_to(self.triangles[:, None, :], (self.n_cells, q, 3))
        vals = np.broadcast_to(QUAD_BARY[None], (self.n_cells, q, 3))
        interp = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                               shape=(self.n_cells * q, self.n_nodes))
        weights = (self.areas[:, None] * QUAD_WEIGHTS[None, :]).ravel()
        return interp, weights

    @cached_property
    def edges(self):
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def angles(self):
        """Interior angles in degrees, shape (cells, 3)."""
        return _triangle_angles(self.corners)

    @cached_property
    def interior_nodes(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    def stiffness_mass(self):
        """P1 stiffness and consistent mass matrices (Euclidean Laplacian)."""
        g = self.shape_gradients
        a = self.areas
        k_loc = np.einsum("cid,cjd->cij", g, g) * a[:, None, None]
        m_loc = (np.ones((3, 3)) + np.eye(3))[None] * (a / 12.0)[:, None, None]
        rows = np.broadcast_to(self.triangles[:, :, None], k_loc.shape).ravel()
        cols = np.broadcast_to(self.triangles[:, None, :], k_loc.shape).ravel()
        shape = (self.n_nodes, self.n_nodes)
        return (sp.csr_matrix((k_loc.ravel(), (rows, cols)), shape=shape),
                sp.csr_matrix((m_loc.ravel(), (rows, cols)), shape=shape))

    def to_off(self):
        lines = ["OFF", f"{self.n_nodes} {self.n_cells} 0"]
        lines += [f"{x:.17g} {y:.17g} 0" for x, y in self.nodes]
        lines += [f"3 {a} {b} {c}" for a, b, c in self.triangles]
        return "\n".join(lines) + "\n"

    def write_off(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_off())


@dataclass(frozen=True, eq=False)
class ScalarField:
    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_nodes,):
            raise ValueError(f"expected {self.mesh.n_nodes} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, mesh, fn):
        return cls(mesh, np.asarray(fn(mesh.nodes), dtype=float))

    def __add__(self, c):
        return ScalarField(self.mesh, self.values + c)

    def __mul__(self, c):
        return ScalarField(self.mesh, self.values * c)

    __rmul__ = __mul__

    def gradients(self):
        """Cell-constant gradients, shape (cells, 2)."""
        return (self.mesh.gradient_operator @ self.values).reshape(-1, 2)

    def quadrature_values(self):
        interp, _ = self.mesh.quadrature
        return interp @ self.values

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_x", "node_y", "value"])
            for (x, y), v in zip(self.mesh.nodes, self.values):
                w.writerow([f"{x:.9g}", f"{y:.9g}", f"{v:.9g}"])

    def to_svg(self, path=None, size=480, title=None):
        svg = field_svg(self, size, title)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(svg)
        return svg


def cell_gradient(field: ScalarField, tri: int):
    """Exact gradient of the linear interpolant on one triangle."""
    g = field.mesh.shape_gradients[tri]
    return field.values[field.mesh.triangles[tri]] @ g


def integrate_power(field: ScalarField, p: float, weight=None, signed=False):
    """∫|u|^p, or ∫|u|^{p-2}u when ``signed``, by the 7-point rule per triangle."""
    if p < 1:
        raise ValueError("integrate_power needs p >= 1")
    interp, w = field.mesh.quadrature
    u = interp @ field.values
    a = np.abs(u)
    f = a ** (p - 1.0) * np.sign(u) if signed else a**p
    if weight is not None:
        f = f * (interp @ np.asarray(weight, dtype=float))
    return float(w @ f)


def dirichlet_energy(F: NormSpec, field: ScalarField, p: float):
    """Σ over cells of area · F(∇u)^p."""
    if p <= 1:
        raise ValueError("dirichlet_energy needs p > 1")
    return float(field.mesh.areas @ F.evaluate(field.gradients()) ** p)


# ---------------------------------------------------------------- meshing

def _triangle_angles(p):
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)

    def ang(x, y, z):
        return np.degrees(np.arccos(np.clip((y * y + z * z - x * x) / (2 * y * z), -1.0, 1.0)))

    return np.stack([ang(a, b, c), ang(b, c, a), ang(c, a, b)], axis=1)


def _circumcenters(p):
    ax, ay = p[:, 0, 0], p[:, 0, 1]
    bx, by = p[:, 1, 0] - ax, p[:, 1, 1] - ay
    cx, cy = p[:, 2, 0] - ax, p[:, 2, 1] - ay
    d = 2.0 * (bx * cy - by * cx)
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    return np.stack([ax + (cy * b2 - by * c2) / d, ay + (bx * c2 - cx * b2) / d], axis=1)


def _edge_params(a, b, h, corner_a, corner_b):
    """Parameters t in (0, 1) of boundary points on segment a-b."""
    length = float(np.linalg.norm(b - a))
    # graded shells near sharp corners, geometric with ratio 1 + angle
    near_a = _shells(corner_a, h, length)
    near_b = _shells(corner_b, h, length)
    lo = near_a[-1] if near_a else 0.0
    hi = length - (near_b[-1] if near_b else 0.0)
    n = max(1, math.ceil((hi - lo) / h - 1e-9))
    mid = list(np.linspace(lo, hi, n + 1))
    dist = sorted(set(near_a) | set(mid) | {length - r for r in near_b})
    t = np.array(dist) / length
    return t[(t > 1e-12) & (t < 1 - 1e-12)]


def _shells(angle, h, length):
    if angle is None or angle >= SHARP_CORNER:
        return []
    ratio = 1.0 + angle
    outer = min(h / max(math.sin(angle), 1e-3), 0.45 * length)
    radii = [outer]
    while radii[-1] / ratio > 0.7 * h * min(1.0, 4.0 * angle):
        radii.append(radii[-1] / ratio)
    return sorted(radii)


def _boundary_points(omega: ConvexPolygon, h):
    v = omega.vertices
    angles = omega.interior_angles
    pts, seg_owner = [], []
    for i in range(len(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        pts.append(a)
        seg_owner.append(i)
        for t in _edge_params(a, b, h, angles[i], angles[(i + 1) % len(v)]):
            pts.append(a + t * (b - a))
            seg_owner.append(i)
    return np.array(pts), np.array(seg_owner)


def _interior_lattice(omega: ConvexPolygon, h):
    lo, hi = omega.vertices.min(axis=0), omega.vertices.max(axis=0)
    dy = h * math.sqrt(3.0) / 2.0
    ys = np.arange(lo[1], hi[1] + dy, dy)
    rows = []
    for j, y in enumerate(ys):
        xs = np.arange(lo[0] + (0.5 * h if j % 2 else 0.0), hi[0] + h, h)
        rows.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    pts = np.concatenate(rows)
    return pts[omega.signed_margin(pts) > 0.5 * h]


class _Mesher:
    def __init__(self, omega: ConvexPolygon, h):
        self.omega = omega
        self.h = h
        self.boundary, self.owner = _boundary_points(omega, h)
        self.interior = _interior_lattice(omega, h)
        self.sharp = {i for i, a in enumerate(omega.interior_angles) if a < math.radians(MIN_ANGLE_DEG)}
        c = omega.centroid
        r = 10.0 * omega.scale
        t = 2.0 * np.pi * np.arange(16) / 16
        self.ghosts = c + r * np.stack([np.cos(t), np.sin(t)], axis=1)

    @property
    def nb(self):
        return len(self.boundary)

    def points(self):
        return np.concatenate([self.boundary, self.interior])

    def delaunay(self):
        pts = self.points()
        tri = Delaunay(np.concatenate([pts, self.ghosts])).simplices
        tri = tri[np.all(tri < len(pts), axis=1)]
        p = pts[tri]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        tri[area < 0] = tri[area < 0][:, [0, 2, 1]]
        return pts, tri

    def segments(self):
        i = np.arange(self.nb)
        return np.stack([i, (i + 1) % self.nb], axis=1)

    def missing_segments(self, tri):
        e = np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        have = set(map(tuple, e))
        s = np.sort(self.segments(), axis=1)
        return [k for k, (a, b) in enumerate(s) if (a, b) not in have]

    def split_segments(self, ks):
        ks = sorted(set(ks), reverse=True)
        b = list(self.boundary)
        o = list(self.owner)
        for k in ks:
            a, c = b[k], b[(k + 1) % len(b)]
            b.insert(k + 1, 0.5 * (a + c))
            o.insert(k + 1, o[k])
        self.boundary = np.array(b)
        self.owner = np.array(o)
        # drop interior points now encroaching the new subsegments
        self._cull_encroaching()

    def _cull_encroaching(self):
        if len(self.interior) == 0:
            return
        seg = self.segments()
        a, b = self.boundary[seg[:, 0]], self.boundary[seg[:, 1]]
        mid, rad = 0.5 * (a + b), 0.5 * np.linalg.norm(b - a, axis=1)
        tree = cKDTree(self.interior)
        drop = set()
        for m, r in zip(mid, rad):
            drop.update(tree.query_ball_point(m, r * (1.0 - 1e-9)))
        if drop:
            keep = np.ones(len(self.interior), dtype=bool)
            keep[list(drop)] = False
            self.interior = self.interior[keep]

    def encroached(self, x):
        """Index of a boundary subsegment whose diametral disk contains x, or -1."""
        seg = self.segments()
        a, b = self.boundary[seg[:, 0]], self.boundary[seg[:, 1]]
        mid, rad = 0.5 * (a + b), 0.5 * np.linalg.norm(b - a, axis=1)
        d = np.linalg.norm(x[:, None, :] - mid[None], axis=2) - rad[None]
        k = np.argmin(d, axis=1)
        return np.where(d[np.arange(len(x)), k] < 0.0, k, -1)

    def smooth(self, passes=3):
        for _ in range(passes):
            pts, tri = self.delaunay()
            n = len(pts)
            e = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
            adj = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
            adj = ((adj + adj.T) > 0).astype(float)
            deg = np.asarray(adj.sum(axis=1)).ravel()
            avg = (adj @ pts) / np.maximum(deg, 1)[:, None]
            new = avg[self.nb:]
            inside = self.omega.signed_margin(new) > 0.25 * self.h
            self.interior = np.where(inside[:, None], new, self.interior)

    def bad_cells(self, pts, tri):
        p = pts[tri]
        ang = _triangle_angles(p)
        sharp_vertex = np.isin(tri, list(self._sharp_nodes()))
        ang_checked = np.where(sharp_vertex, 180.0, ang)
        lengths = np.linalg.norm(p - p[:, [1, 2, 0]], axis=2)
        bad = (ang_checked.min(axis=1) < MIN_ANGLE_DEG) | (lengths.max(axis=1) > MAX_EDGE_FACTOR * self.h)
        score = np.maximum(MIN_ANGLE_DEG - ang_checked.min(axis=1), 0.0) + lengths.max(axis=1) / self.h
        return np.flatnonzero(bad), score

    def _sharp_nodes(self):
        # boundary indices of input vertices sharper than the angle floor
        v = self.omega.vertices
        out = []
        for i in self.sharp:
            out.append(int(np.argmin(np.linalg.norm(self.boundary - v[i], axis=1))))
        return out

    def refine(self, max_rounds=200):
        for _ in range(max_rounds):
            pts, tri = self.delaunay()
            missing = self.missing_segments(tri)
            if missing:
                self.split_segments(missing)
                continue
            bad, score = self.bad_cells(pts, tri)
            if len(bad) == 0:
                return pts, tri
            bad = bad[np.argsort(-score[bad])]
            cc = _circumcenters(pts[tri[bad]])
            inside = self.omega.signed_margin(cc) > 0
            enc = np.full(len(cc), -1)
            enc[inside] = self.encroached(cc[inside])
            # outside circumcenters: split the segment nearest to the circumcenter
            if np.any(~inside):
                enc[~inside] = self.encroached_or_nearest(cc[~inside])
            splits = set(enc[enc >= 0].tolist())
            fresh = cc[enc < 0]
            if len(fresh):
                fresh = _thin(fresh, 0.3 * _local_scale(pts, tri[bad][enc < 0]))
                if len(self.interior):
                    d, _ = cKDTree(pts).query(fresh)
                    fresh = fresh[d > 1e-9 * self.h]
                self.interior = np.concatenate([self.interior, fresh]) if len(self.interior) else fresh
            if splits:
                self.split_segments(splits)
        raise RuntimeError("mesh refinement did not converge")

    def encroached_or_nearest(self, x):
        seg = self.segments()
        a, b = self.boundary[seg[:, 0]], self.boundary[seg[:, 1]]
        mid = 0.5 * (a + b)
        return np.argmin(np.linalg.norm(x[:, None, :] - mid[None], axis=2), axis=1)


def _local_scale(pts, tri):
    p = pts[tri]
    return np.linalg.norm(p - p[:, [1, 2, 0]], axis=2).min(axis=1)


def _thin(x, radius):
    """Greedy removal of points closer than ``radius`` (per point) to an earlier one."""
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (len(x),))
    tree = cKDTree(x)
    keep = np.ones(len(x), dtype=bool)
    for i in range(len(x)):
        if not keep[i]:
            continue
        for j in tree.query_ball_point(x[i], radius[i]):
            if j > i:
                keep[j] = False
    return x[keep]


def triangulate(omega: ConvexPolygon, h: float) -> TriMesh:
    """Quality triangulation of a convex polygon with target edge length ``h``.

    Max edge <= 1.5 h; min angle >= 20 degrees except at polygon corners that
    are themselves sharper than that.
    """
    if not h > 0:
        raise ConfigError("mesh size must be positive")
    diam = float(np.max(np.linalg.norm(omega.vertices[:, None] - omega.vertices[None], axis=2)))
    if h >= diam:
        raise ConfigError("mesh size must be smaller than the domain diameter")
    m = _Mesher(omega, h)
    m.smooth()
    pts, tri = m.refine()
    nb = m.nb
    mesh = TriMesh(nodes=pts, triangles=tri.astype(np.int64),
                   boundary_nodes=np.arange(nb, dtype=np.int64), target_h=float(h), domain=omega)
    rel = abs(mesh.total_area - omega.area) / omega.area
    if rel > 1e-12 or np.any(mesh.areas <= 0):
        raise RuntimeError(f"triangulation does not tile the polygon (relative area error {rel:.3g})")
    return mesh


# ---------------------------------------------------------------- SVG

def _colour(t):
    # blue -> white -> red
    t = np.clip(t, 0.0, 1.0)
    r = np.where(t < 0.5, 2 * t, 1.0)
    g = np.where(t < 0.5, 2 * t, 2 - 2 * t)
    b = np.where(t < 0.5, 1.0, 2 - 2 * t)
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(int)


def field_svg(field: ScalarField, size=480, title=None):
    mesh = field.mesh
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    s = (size - 20) / float(max(hi - lo))
    xy = (mesh.nodes - lo) * s + 10
    xy[:, 1] = size - xy[:, 1]
    cell = field.values[mesh.triangles].mean(axis=1)
    vmin, vmax = float(field.values.min()), float(field.values.max())
    cols = _colour((cell - vmin) / (vmax - vmin) if vmax > vmin else np.full_like(cell, 0.5))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">']
    if title:
        out.append(f"<title>{title}</title>")
    for t, (r, g, b) in zip(mesh.triangles, cols):
        pts = " ".join(f"{xy[i, 0]:.9g},{xy[i, 1]:.9g}" for i in t)
        out.append(f'<polygon points="{pts}" fill="rgb({r},{g},{b})" stroke="none"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
