"""Pointwise ∞-Laplacian operators and residual screens for explicit candidates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .anisotropy import NormSpec
from .convexgeom import ConvexPolygon
from .errors import DomainError
from .fem import ScalarField

SINGULAR_TOL = 1e-12


@dataclass
class Jet:
    """Value, gradient and Hessian of a candidate at one point."""

    u: float
    grad: np.ndarray
    hess: np.ndarray


class SmoothCandidate:
    """A C² function off a finite singular set, evaluated through jets."""

    def jet(self, F: NormSpec, x) -> Jet:
        raise NotImplementedError

    def singular_points(self):
        return []

    def __add__(self, other):
        return Combination([(1.0, self), (1.0, other)])

    def __sub__(self, other):
        return Combination([(1.0, self), (-1.0, other)])


class RadialCandidate(SmoothCandidate):
    """u(x) = φ(F°(x - center))."""

    center: np.ndarray

    def profile(self, r):
        """(φ(r), φ'(r), φ''(r))."""
        raise NotImplementedError

    def singular_points(self):
        return [np.asarray(self.center, dtype=float)]

    def jet(self, F, x):
        z = np.asarray(x, dtype=float) - np.asarray(self.center, dtype=float)
        if np.linalg.norm(z) <= SINGULAR_TOL:
            raise DomainError("candidate is not differentiable at its center")
        Fo = F.polar()
        r = float(Fo.evaluate(z))
        phi, d1, d2 = self.profile(r)
        g = Fo.gradient(z)
        return Jet(phi, d1 * g, d1 * Fo.hessian(z) + d2 * np.outer(g, g))


@dataclass
class Cone(RadialCandidate):
    center: np.ndarray
    slope: float
    offset: float = 0.0

    def profile(self, r):
        return self.offset - self.slope * r, -self.slope, 0.0


@dataclass
class QuadraticBarrier(RadialCandidate):
    """g = (1 + ε) F°(x - x₀) - γ F°(x - x₀)²."""

    center: np.ndarray
    eps: float
    gam: float

    def profile(self, r):
        return (1 + self.eps) * r - self.gam * r * r, 1 + self.eps - 2 * self.gam * r, -2 * self.gam


@dataclass
class SqrtBarrier(RadialCandidate):
    """φ = u_top - (u_top - u_bot) (F°(x - x̄) / r)^{1/2}."""

    center: np.ndarray
    radius: float
    u_top: float
    u_bot: float

    def profile(self, rho):
        d = self.u_top - self.u_bot
        root = math.sqrt(rho / self.radius)
        return (self.u_top - d * root,
                -d / (2.0 * math.sqrt(self.radius * rho)),
                d / (4.0 * math.sqrt(self.radius) * rho**1.5))


@dataclass
class Expression(SmoothCandidate):
    """Candidate from explicit callables for u, ∇u and ∇²u."""

    fn: callable
    grad: callable
    hess: callable

    def jet(self, F, x):
        x = np.asarray(x, dtype=float)
        return Jet(float(self.fn(x)), np.asarray(self.grad(x), dtype=float),
                   np.asarray(self.hess(x), dtype=float))


@dataclass
class Constant(SmoothCandidate):
    value: float

    def jet(self, F, x):
        return Jet(float(self.value), np.zeros(2), np.zeros((2, 2)))


@dataclass
class Combination(SmoothCandidate):
    terms: list

    def singular_points(self):
        return [s for _, c in self.terms for s in c.singular_points()]

    def jet(self, F, x):
        jets = [(a, c.jet(F, x)) for a, c in self.terms]
        return Jet(sum(a * j.u for a, j in jets), sum(a * j.grad for a, j in jets),
                   sum(a * j.hess for a, j in jets))


def cone_pair(F: NormSpec, x0, x1):
    """u = d_F(x, x₁) - d_F(x, x₀): positive near x₀, negative near x₁."""
    return Cone(np.asarray(x1, dtype=float), -1.0) - Cone(np.asarray(x0, dtype=float), -1.0)


class Tabulated(SmoothCandidate):
    """P1 field with moving least-squares quadratic reconstruction over the 2-ring."""

    def __init__(self, fld: ScalarField, support=None):
        self.field = fld
        self.support = fld.mesh.target_h if support is None else support

    @cached_property
    def _adjacency(self):
        mesh = self.field.mesh
        nbrs = [set() for _ in range(mesh.n_nodes)]
        for a, b in mesh.edges:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return nbrs

    @cached_property
    def _tree(self):
        return cKDTree(self.field.mesh.nodes)

    def _ring(self, x):
        _, i = self._tree.query(x, k=3)
        ring = set(int(j) for j in np.atleast_1d(i))
        for _ in range(2):
            ring |= set(k for j in list(ring) for k in self._adjacency[j])
        return np.array(sorted(ring))

    def jet(self, F, x):
        x = np.asarray(x, dtype=float)
        idx = self._ring(x)
        d = self.field.mesh.nodes[idx] - x
        h = self.support
        w = np.exp(-np.sum(d * d, axis=1) / (h * h))
        basis = np.stack([np.ones(len(d)), d[:, 0], d[:, 1],
                          0.5 * d[:, 0] ** 2, d[:, 0] * d[:, 1], 0.5 * d[:, 1] ** 2], axis=1)
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(basis * sw[:, None], self.field.values[idx] * sw, rcond=None)
        return Jet(float(coef[0]), coef[1:3].copy(),
                   np.array([[coef[3], coef[4]], [coef[4], coef[5]]]))


# ---------------------------------------------------------------- operators

def _as_jet(F, c, x):
    return c if isinstance(c, Jet) else c.jet(F, x)


def q_infinity_jet(F: NormSpec, j: Jet):
    if not np.any(j.grad):
        return 0.0
    n = F.gradient(j.grad)
    return float(F.evaluate(j.grad) ** 2 * (j.hess @ n) @ n)


def q_infinity_eig(F: NormSpec, j: Jet):
    """Same quantity through the spectral decomposition of ∇²u."""
    if not np.any(j.grad):
        return 0.0
    n = F.gradient(j.grad)
    lam, vec = np.linalg.eigh(0.5 * (j.hess + j.hess.T))
    return float(F.evaluate(j.grad) ** 2 * np.sum(lam * (vec.T @ n) ** 2))


def q_infinity(F: NormSpec, c, x):
    """Q_∞u = F²(∇u) (∇²u ∇F(∇u))·∇F(∇u); 0 where ∇u = 0."""
    return q_infinity_jet(F, _as_jet(F, c, x))


def finsler_laplacian(F: NormSpec, c, x):
    """Δ_F u = div(F(∇u)∇F(∇u)) = tr(∇²(F²/2)(∇u) ∇²u)."""
    j = _as_jet(F, c, x)
    if not np.any(j.grad):
        raise DomainError("Δ_F needs ∇u != 0")
    g = F.gradient(j.grad)
    a = F.evaluate(j.grad) * F.hessian(j.grad) + np.outer(g, g)
    return float(np.sum(a * j.hess))


def operator_A(F: NormSpec, c, x, lam):
    """min{F(∇u) - Λu, -Q_∞u}."""
    j = _as_jet(F, c, x)
    return min(float(F.evaluate(j.grad)) - lam * j.u, -q_infinity_jet(F, j))


def operator_B(F: NormSpec, c, x, lam):
    """max{-F(∇u) - Λu, -Q_∞u}."""
    j = _as_jet(F, c, x)
    return max(-float(F.evaluate(j.grad)) - lam * j.u, -q_infinity_jet(F, j))


def g_p_residual(F: NormSpec, c, x, p, lam_p):
    """G_p = -(p-2)F^{p-4}Q_∞u - F^{p-2}Δ_F u - Λ_p^p |u|^{p-2}u; Λ_p is the p-th root."""
    j = _as_jet(F, c, x)
    source = lam_p**p * abs(j.u) ** (p - 2.0) * j.u if j.u != 0 else 0.0
    if not np.any(j.grad):
        # for p > 2 both gradient terms carry a factor F^{p-2} -> 0
        if p > 2 or not np.any(j.hess):
            return -source
        raise DomainError("G_2 needs ∇u != 0 unless the Hessian vanishes")
    f = float(F.evaluate(j.grad))
    return (-(p - 2.0) * f ** (p - 4.0) * q_infinity_jet(F, j)
            - f ** (p - 2.0) * finsler_laplacian(F, j, x) - source)


def neumann_flux(F: NormSpec, c, x, nu):
    """∇F(∇u(x))·ν."""
    j = _as_jet(F, c, x)
    if not np.any(j.grad):
        raise DomainError("flux undefined where ∇u = 0")
    return float(F.gradient(j.grad) @ np.asarray(nu, dtype=float))


@dataclass
class OperatorSample:
    x: np.ndarray
    u: float
    grad: np.ndarray
    hess: np.ndarray
    f_grad: float
    q_inf: float
    delta_f: float | None
    a_value: float
    b_value: float
    flux: float | None = None


def sample(F: NormSpec, c, x, lam, nu=None) -> OperatorSample:
    j = _as_jet(F, c, x)
    nz = bool(np.any(j.grad))
    return OperatorSample(
        x=np.asarray(x, dtype=float), u=j.u, grad=j.grad, hess=j.hess,
        f_grad=float(F.evaluate(j.grad)), q_inf=q_infinity_jet(F, j),
        delta_f=finsler_laplacian(F, j, x) if nz else None,
        a_value=operator_A(F, j, x, lam), b_value=operator_B(F, j, x, lam),
        flux=neumann_flux(F, j, x, nu) if (nu is not None and nz) else None)


# ---------------------------------------------------------------- residual scan

@dataclass
class ScanReport:
    violations: list = field(default_factory=list)
    max_violation: float = 0.0
    samples: int = 0
    worst: dict | None = None

    def to_json(self):
        return {"violations": self.violations, "max_violation": float(self.max_violation),
                "samples": int(self.samples)}


def scan_points(omega: ConvexPolygon, n=24, boundary_per_edge=8, margin=0.0):
    """Interior lattice points and boundary points with outer normals."""
    lo, hi = omega.vertices.min(axis=0), omega.vertices.max(axis=0)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n + 2)[1:-1], np.linspace(lo[1], hi[1], n + 2)[1:-1])
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pts = pts[omega.signed_margin(pts) > margin]
    t = (np.arange(boundary_per_edge) + 0.5) / boundary_per_edge
    bpts, normals = [], []
    for a, b, nu in zip(omega.vertices, np.roll(omega.vertices, -1, axis=0), omega.normals):
        bpts.append(a + t[:, None] * (b - a))
        normals.append(np.repeat(nu[None], len(t), axis=0))
    return pts, np.concatenate(bpts), np.concatenate(normals)


def residual_scan(F: NormSpec, omega: ConvexPolygon, c: SmoothCandidate, lam, n=24,
                  boundary_per_edge=8, tol=1e-8, exclude=None, zero_tol=None, points=None):
    """Screen the ∞-eigenvalue conditions on a sample of points.

    Interior points are routed by the sign of u with zero-set tolerance
    τ₀ = 1e-3 ‖u‖_∞ (or ``zero_tol``): branch A where u > τ₀, B where u < -τ₀,
    -Q_∞ on the zero set.  Boundary points report the Neumann flux.  Points
    closer than ``exclude`` to a singular point of the candidate are skipped.
    """
    inner, bpts, normals = scan_points(omega, n, boundary_per_edge)
    if points is not None:
        inner = np.asarray(points, dtype=float)
    sing = c.singular_points()
    exclude = (1e-6 * omega.scale) if exclude is None else exclude

    def allowed(x):
        return all(np.linalg.norm(x - s) > exclude for s in sing)

    jets = [(x, c.jet(F, x)) for x in inner if allowed(x)]
    bj = [(x, nu, c.jet(F, x)) for x, nu in zip(bpts, normals) if allowed(x)]
    sup = max([abs(j.u) for _, j in jets] + [abs(j.u) for _, _, j in bj] + [0.0])
    tau = 1e-3 * sup if zero_tol is None else zero_tol
    report = ScanReport(samples=len(jets) + len(bj))
    for x, j in jets:
        if j.u > tau:
            branch, value = "A", operator_A(F, j, x, lam)
        elif j.u < -tau:
            branch, value = "B", operator_B(F, j, x, lam)
        else:
            branch, value = "Q", -q_infinity_jet(F, j)
        _record(report, x, branch, value, tol)
    for x, nu, j in bj:
        if not np.any(j.grad):
            continue
        _record(report, x, "flux", neumann_flux(F, j, x, nu), tol)
    return report


def _record(report, x, branch, value, tol):
    if abs(value) > tol:
        entry = {"x": [float(x[0]), float(x[1])], "branch": branch, "value": float(value)}
        report.violations.append(entry)
        if abs(value) > report.max_violation:
            report.max_violation = abs(value)
            report.worst = entry
