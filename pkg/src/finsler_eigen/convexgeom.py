"""Convex polygons and their anisotropic metric quantities."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from functools import cached_property
from importlib import resources

import numpy as np
from scipy.optimize import minimize

from .anisotropy import GOLDEN, NormSpec, wulff_measure
from .errors import ConfigError, DomainError

CONVEXITY_RTOL = 1e-12


class ConvexPolygon:
    """Strictly convex polygon with counter-clockwise vertices."""

    def __init__(self, vertices):
        v = np.array(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ConfigError("a polygon needs at least three 2D vertices")
        if not np.all(np.isfinite(v)):
            raise ConfigError("polygon vertices must be finite")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        scale = float(np.max(np.linalg.norm(e, axis=1))) ** 2
        bad = np.flatnonzero(cross <= CONVEXITY_RTOL * scale)
        if len(bad):
            raise ConfigError(
                f"polygon is not strictly convex and counter-clockwise at vertex {(bad[0] + 1) % len(v)}")
        turning = np.arctan2(cross, (e * np.roll(e, -1, axis=0)).sum(axis=1)).sum()
        if abs(turning - 2.0 * np.pi) > 1e-6:
            raise ConfigError("polygon boundary winds more than once")
        v.setflags(write=False)
        self.vertices = v

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"ConvexPolygon({len(self)} vertices, area={self.area:.6g})"

    @classmethod
    def hull(cls, points, tol=1e-12):
        """Convex hull of ``points`` with collinear vertices dropped."""
        from scipy.spatial import ConvexHull

        pts = np.asarray(points, dtype=float)
        v = pts[ConvexHull(pts).vertices]
        return cls(drop_collinear(v, tol))

    @cached_property
    def edges(self):
        """Edge vectors b - a for consecutive vertices."""
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    @cached_property
    def normals(self):
        """Outward unit normals, one per edge."""
        e = self.edges
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1)[:, None]

    @cached_property
    def offsets(self):
        return (self.normals * self.vertices).sum(axis=1)

    @cached_property
    def area(self):
        v, w = self.vertices, np.roll(self.vertices, -1, axis=0)
        return float(0.5 * np.sum(v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]))

    @cached_property
    def centroid(self):
        v, w = self.vertices, np.roll(self.vertices, -1, axis=0)
        c = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
        return ((v + w) * c[:, None]).sum(axis=0) / (6.0 * self.area)

    @cached_property
    def interior_angles(self):
        e = self.edges
        prev = np.roll(e, 1, axis=0)
        cosang = -(prev * e).sum(axis=1) / (np.linalg.norm(prev, axis=1) * np.linalg.norm(e, axis=1))
        return np.arccos(np.clip(cosang, -1.0, 1.0))

    @property
    def scale(self):
        return float(np.ptp(self.vertices, axis=0).max())

    def signed_margin(self, x):
        """Euclidean distance to the boundary, negative outside."""
        x = np.asarray(x, dtype=float)
        return np.min(self.offsets - x @ self.normals.T, axis=-1)

    def contains(self, x, tol=1e-12):
        return self.signed_margin(x) >= -tol * self.scale

    def transformed(self, a=None, shift=(0.0, 0.0)):
        """Image under x -> a x + shift (a must preserve orientation)."""
        v = self.vertices if a is None else self.vertices @ np.asarray(a, dtype=float).T
        return ConvexPolygon(v + np.asarray(shift, dtype=float))

    def scaled(self, t):
        return ConvexPolygon(self.vertices * float(t))

    def to_json(self):
        return {"vertices": self.vertices.tolist()}

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or "vertices" not in obj:
            raise ConfigError("polygon JSON must be an object with a 'vertices' list")
        return cls(obj["vertices"])


def drop_collinear(vertices, tol=1e-12):
    """Remove vertices whose neighbouring edges are parallel."""
    v = np.asarray(vertices, dtype=float)
    while len(v) > 3:
        e = np.roll(v, -1, axis=0) - v
        prev = np.roll(e, 1, axis=0)
        cross = prev[:, 0] * e[:, 1] - prev[:, 1] * e[:, 0]
        scale = float(np.max(np.linalg.norm(e, axis=1))) ** 2
        keep = cross > tol * scale
        if keep.all():
            break
        v = v[keep]
    return v


def point_distance(F: NormSpec, x, y):
    """d_F(x, y) = F°(x - y)."""
    return F.polar().evaluate(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))


def _halfplane_distance(F: NormSpec, omega: ConvexPolygon, x):
    # distance to the supporting line of each edge is (c_i - n_i·x) / F(n_i)
    scale = F.evaluate(omega.normals)
    return np.min((omega.offsets - np.asarray(x, dtype=float) @ omega.normals.T) / scale, axis=-1)


def _segment_distance(Fo: NormSpec, a, b, x, iters=60):
    # min_t F°(x - a - t (b - a)) on [0, 1] for every point/edge pair
    e = b - a
    lo = np.zeros(x.shape[:-1])
    hi = np.ones(x.shape[:-1])

    def f(t):
        return Fo.evaluate(x - a - t[..., None] * e)

    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
        fnew = f(new)
        d, fd, c, fc = (np.where(left, c, new), np.where(left, fc, fnew),
                        np.where(left, new, d), np.where(left, fnew, fd))
    t = 0.5 * (lo + hi)
    best = np.minimum(f(t), np.minimum(f(np.zeros_like(t)), f(np.ones_like(t))))
    if not Fo.crystalline:
        z = x - a - t[..., None] * e
        ok = np.any(z != 0.0, axis=-1)
        zs = np.where(ok[..., None], z, 1.0)
        d1 = -(Fo.gradient(zs) * e).sum(axis=-1)
        d2 = np.einsum("...i,...ij,...j->...", e, Fo.hessian(zs), e)
        step = np.where(ok & (d2 > 0), d1 / np.where(d2 > 0, d2, 1.0), 0.0)
        polished = f(np.clip(t - step, 0.0, 1.0))
        best = np.minimum(best, polished)
    return best


def boundary_distance(F: NormSpec, omega: ConvexPolygon, x, method="segment"):
    """d_F(x) = inf over the boundary of F°(x - y), for x in the closed polygon.

    ``method="segment"`` minimises over every edge by golden section with a
    Newton polish; ``method="halfplane"`` uses the closed form
    min_i (c_i - n_i·x) / F(n_i), valid for convex polygons.
    """
    x = np.asarray(x, dtype=float)
    margin = omega.signed_margin(x)
    tol = 1e-12 * omega.scale
    if np.any(margin < -tol):
        raise DomainError("boundary_distance needs points in the closed polygon")
    if method == "halfplane":
        out = _halfplane_distance(F, omega, x)
    elif method == "segment":
        Fo = F.polar()
        a = omega.vertices
        b = np.roll(a, -1, axis=0)
        out = _segment_distance(Fo, a, b, x[..., None, :]).min(axis=-1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.where(margin <= tol, 0.0, np.maximum(out, 0.0))


def diameter(F: NormSpec, omega: ConvexPolygon):
    """diam_F as the largest F°(v_i - v_j) over vertex pairs, with an attaining pair."""
    v = omega.vertices
    diff = v[:, None, :] - v[None, :, :]
    d = F.polar().evaluate(diff)
    i, j = np.unravel_index(np.argmax(d), d.shape)
    return float(d[i, j]), v[i].copy(), v[j].copy()


def inradius(F: NormSpec, omega: ConvexPolygon, grid=33):
    """Anisotropic inradius ρ_F and an incenter.

    d_F is concave on a convex polygon, so every local maximum is global; the
    best points of a ``grid`` x ``grid`` seed lattice start Nelder-Mead runs.
    """
    lo, hi = omega.vertices.min(axis=0), omega.vertices.max(axis=0)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], grid + 2)[1:-1],
                         np.linspace(lo[1], hi[1], grid + 2)[1:-1])
    seeds = np.stack([gx.ravel(), gy.ravel()], axis=1)
    seeds = seeds[omega.signed_margin(seeds) > 0]
    if len(seeds) == 0:
        seeds = omega.centroid[None]
    values = _halfplane_distance(F, omega, seeds)
    order = np.argsort(values)[::-1][:3]
    xtol = 1e-9 * max(omega.scale, 1e-300) * 1e-1

    def objective(z):
        return -float(_halfplane_distance(F, omega, z))

    best_val, best_x = -np.inf, None
    for s in seeds[order]:
        step = 0.25 * float(values.max())
        simplex = np.array([s, s + [step, 0.0], s + [0.0, step]])
        res = minimize(objective, s, method="Nelder-Mead",
                       options={"xatol": xtol, "fatol": 1e-15, "maxiter": 4000,
                                "initial_simplex": simplex})
        if -res.fun > best_val:
            best_val, best_x = -res.fun, res.x
    return float(best_val), best_x


@dataclass
class MetricReport:
    diameter: float
    inradius: float
    incenter: np.ndarray
    diameter_pair: tuple
    area: float
    isodiametric_ratio: float

    CSV_FIELDS = ("diameter", "inradius", "incenter_x", "incenter_y", "pair_ax", "pair_ay",
                  "pair_bx", "pair_by", "area", "isodiametric_ratio")

    def check(self, rtol=1e-9):
        if self.diameter < 2.0 * self.inradius * (1.0 - rtol):
            raise AssertionError(f"diameter {self.diameter} < 2 * inradius {self.inradius}")
        if self.isodiametric_ratio > 1.0 + rtol:
            raise AssertionError(f"isodiametric ratio {self.isodiametric_ratio} exceeds 1")

    def to_json(self):
        values = [self.diameter, self.inradius, *self.incenter, *self.diameter_pair[0],
                  *self.diameter_pair[1], self.area, self.isodiametric_ratio]
        return {k: float(v) for k, v in zip(self.CSV_FIELDS, values)}

    def csv_row(self):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [f"{v:.9g}" for v in self.to_json().values()])
        return buf.getvalue()


def isodiametric_ratio(F: NormSpec, omega: ConvexPolygon, kappa=None, diam=None):
    """|Ω| / ((κ₂ / 4) diam_F(Ω)²)."""
    kappa = wulff_measure(F) if kappa is None else kappa
    diam = diameter(F, omega)[0] if diam is None else diam
    return omega.area / (0.25 * kappa * diam**2)


def metric_report(F: NormSpec, omega: ConvexPolygon, kappa=None) -> MetricReport:
    diam, a, b = diameter(F, omega)
    rho, center = inradius(F, omega)
    report = MetricReport(diameter=diam, inradius=rho, incenter=np.asarray(center),
                          diameter_pair=(a, b), area=omega.area,
                          isodiametric_ratio=isodiametric_ratio(F, omega, kappa, diam))
    report.check()
    return report


def wulff_polygon(F: NormSpec, radius=1.0, sides=256, center=(0.0, 0.0)):
    """Inscribed polygon of W_r(center).

    Vertices are the boundary points r ∇F(n) with outer normals n at equally
    spaced angles, so strongly curved parts of the boundary get more vertices.
    """
    theta = 2.0 * np.pi * (np.arange(sides) + 0.5) / sides
    normals = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    v = radius * F.gradient(normals)
    return ConvexPolygon(drop_collinear(v + np.asarray(center, dtype=float)))


def wulff_rescaled(F: NormSpec, omega: ConvexPolygon, sides=256) -> ConvexPolygon:
    """Polygonal Ω^#: the Wulff shape about the origin with |Ω^#| = |Ω|."""
    if sides < 16:
        raise ValueError("wulff_rescaled needs at least 16 sides")
    r = math.sqrt(omega.area / wulff_measure(F))
    return wulff_polygon(F, r, sides)


def direction_constant(F: NormSpec):
    """γ with F°(t e₁) = γ|t|."""
    return float(F.polar().evaluate(np.array([1.0, 0.0])))


def spindle(F: NormSpec, k, d) -> ConvexPolygon:
    """Ω_k: intersection of the opposite cones with apexes (±ℓ, 0), ℓ = d / (2γ)."""
    if k < 1 or d <= 0:
        raise ValueError("spindle needs k >= 1 and d > 0")
    ell = d / (2.0 * direction_constant(F))
    return ConvexPolygon([[-ell, 0.0], [0.0, -ell / k], [ell, 0.0], [0.0, ell / k]])


def _builtin_table():
    text = resources.files("finsler_eigen").joinpath("data/builtin_domains.json").read_text()
    return json.loads(text)


def builtin_domain(name, F: NormSpec | None = None) -> ConvexPolygon:
    """Pinned domains: ``square``, ``disk256``, ``wulff256`` and ``spindle(k,d)``."""
    name = name.strip()
    if name in ("square", "disk256"):
        return ConvexPolygon(_builtin_table()[name])
    if name == "wulff256":
        if F is None:
            raise ConfigError("wulff256 needs a norm")
        return wulff_polygon(F, 1.0, 256)
    if name.startswith("spindle"):
        try:
            k, d = name[name.index("(") + 1:name.rindex(")")].split(",")
            k, d = int(k), float(d)
        except ValueError as exc:
            raise ConfigError(f"malformed spindle name {name!r}") from exc
        if F is None:
            raise ConfigError("spindle domains need a norm")
        return spindle(F, k, d)
    raise ConfigError(f"unknown builtin domain {name!r}")


def random_convex_polygon(rng, n_points=12, radius=1.0):
    """Hull of uniformly random points in a disk (at least three vertices)."""
    while True:
        r = radius * np.sqrt(rng.uniform(size=n_points))
        t = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
        try:
            return ConvexPolygon.hull(np.stack([r * np.cos(t), r * np.sin(t)], axis=1))
        except (ConfigError, ValueError):
            continue


def random_convex_ngon(rng, n=5, radius=1.0, min_gap=0.3):
    """n points on a circle at random angles, consecutive gaps at least ``min_gap`` radians."""
    if n * min_gap >= 2.0 * np.pi:
        raise ValueError("min_gap too large for n vertices")
    while True:
        t = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n))
        gaps = np.diff(np.append(t, t[0] + 2.0 * np.pi))
        if gaps.min() >= min_gap:
            return ConvexPolygon(radius * np.stack([np.cos(t), np.sin(t)], axis=1))
