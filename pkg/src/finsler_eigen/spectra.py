"""Neumann and Dirichlet eigenvalues of the anisotropic p-Laplacian.

Eigenvalues are minima of a nonlinear Rayleigh quotient over P1 fields.  The
quotient is handled in log form, so exponents up to 128 do not overflow:

    log J(u) = log Σ_cells a_c F(∇u_c)^p - log min_c Σ_q w_q |u_q - c|^p.

For the Neumann problem the inner minimum over the shift c is attained exactly
when ∫|u-c|^{p-2}(u-c) = 0, so minimising J over all fields is the same as
minimising the constrained quotient.  Descent directions come from a
Newton-like metric (energy Hessian plus norm Hessian); steps use Armijo
backtracking on log J.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq
from scipy.special import gamma, logsumexp

from .anisotropy import EllipseNorm, LqNorm, NormSpec
from .convexgeom import ConvexPolygon, boundary_distance, diameter, inradius, wulff_polygon
from .errors import ConfigError, DomainError, SolverError
from .fem import ScalarField, TriMesh, triangulate

P_RANGE = (2.0, 128.0)


def pi_p(p):
    """Generalised π: 2π (p-1)^{1/p} / (p sin(π/p))."""
    p = float(p)
    if not p > 1:
        raise DomainError("pi_p needs p > 1")
    return 2.0 * math.pi * (p - 1.0) ** (1.0 / p) / (p * math.sin(math.pi / p))


@dataclass
class SolverOptions:
    max_iter: int = 50000
    rtol: float = 1e-10
    window: int = 25
    stage_rtol: float = 1e-8
    seed: int = 0
    perturbation: float = 1e-3
    armijo: float = 1e-4
    certify: bool = True
    certify_rtol: float = 1e-6


@dataclass
class EigenResult:
    p: float
    lam: float
    field: ScalarField | None
    residual: float
    iterations: int
    constraint_defect: float
    mode: str = "neumann"
    trace: list = field(default_factory=list, repr=False)
    bracket: tuple = (0.0, math.inf)
    values: np.ndarray | None = field(default=None, repr=False)

    @property
    def eigenvalue(self):
        """lam ** p, the eigenvalue of the p-homogeneous problem."""
        return self.lam**self.p

    CSV_FIELDS = ("domain", "norm", "p", "h", "lambda", "residual", "iterations")

    def row(self, domain="", norm="", h=None):
        h = self.field.mesh.target_h if h is None and self.field is not None else h
        return [domain, norm, f"{self.p:.9g}", f"{h:.9g}" if h is not None else "",
                f"{self.lam:.9g}", f"{self.residual:.9g}", str(self.iterations)]

    def to_json(self, domain="", norm=""):
        return {"domain": domain, "norm": norm, "mode": self.mode, "p": float(self.p),
                "h": None if self.field is None else float(self.field.mesh.target_h),
                "lambda": float(self.lam), "eigenvalue": float(self.eigenvalue),
                "residual": float(self.residual), "iterations": int(self.iterations),
                "constraint_defect": float(self.constraint_defect),
                "bracket": [float(b) for b in self.bracket]}


class _Quotient:
    """Discrete log Rayleigh quotient on a fixed mesh (or 1D grid)."""

    def __init__(self, grad_op, cell_weights, dim, interp, quad_weights, F, p,
                 free=None, neumann=True):
        self.G = sp.csr_matrix(grad_op)
        self.a = np.asarray(cell_weights, dtype=float)
        self.dim = dim
        self.Q = sp.csr_matrix(interp)
        self.w = np.asarray(quad_weights, dtype=float)
        self.F = F
        self.p = float(p)
        self.n = self.G.shape[1]
        self.free = np.arange(self.n) if free is None else np.asarray(free)
        self.neumann = neumann
        self.log_a = np.log(self.a)
        self.log_w = np.log(self.w)
        self.Gf = self.G[:, self.free]
        self.Qf = self.Q[:, self.free]
        # metric floor: scaled Euclidean stiffness + mass
        k = self.Gf.T @ sp.diags(np.repeat(self.a, dim)) @ self.Gf
        m = self.Qf.T @ sp.diags(self.w) @ self.Qf
        self.floor = (k, m)

    def with_p(self, p):
        q = object.__new__(_Quotient)
        q.__dict__.update(self.__dict__)
        q.p = float(p)
        return q

    # full vector from free values
    def expand(self, x):
        u = np.zeros(self.n)
        u[self.free] = x
        return u

    def shift(self, x):
        """The c with Σ w |q - c|^{p-2}(q - c) = 0 (0 for Dirichlet)."""
        if not self.neumann:
            return 0.0
        q = self.Q @ self.expand(x)
        lo, hi = float(q.min()), float(q.max())
        if hi - lo <= 1e-300:
            return lo
        scale = max(abs(lo), abs(hi))
        qs = q / scale
        p = self.p

        def s(c):
            d = qs - c
            return float(self.w @ (np.abs(d) ** (p - 1.0) * np.sign(d)))

        c = brentq(s, lo / scale, hi / scale, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)
        return c * scale

    def constraint_defect(self, x):
        q = self.Q @ self.expand(x)
        s = self.w @ (np.abs(q) ** (self.p - 1.0) * np.sign(q))
        t = self.w @ np.abs(q) ** (self.p - 1.0)
        return abs(float(s)) / float(t) if t > 0 else 0.0

    def _log_f(self, u):
        g = (self.G @ u).reshape(-1, self.dim)
        with np.errstate(divide="ignore"):
            log_f = np.log(self.F.evaluate(g))
        return g, log_f

    def log_energy(self, u):
        _, log_f = self._log_f(u)
        return float(logsumexp(self.log_a + self.p * log_f))

    def log_norm(self, u):
        q = self.Q @ u
        with np.errstate(divide="ignore"):
            return float(logsumexp(self.log_w + self.p * np.log(np.abs(q))))

    def log_quotient(self, x):
        """log J and the field after re-centring."""
        c = self.shift(x)
        y = x - c if self.neumann else x
        u = self.expand(y)
        return self.log_energy(u) - self.log_norm(u), y

    def gradient_and_metric(self, y, metric=True):
        """Gradient of log J at a centred field y, and the Newton-like metric."""
        p, dim = self.p, self.dim
        u = self.expand(y)
        g, log_f = self._log_f(u)
        log_e = logsumexp(self.log_a + p * log_f)
        ok = np.isfinite(log_f)
        gs = np.where(ok[:, None], g, 1.0)
        dF = self.F.gradient(gs)
        fval = np.exp(np.where(ok, log_f, 0.0))
        # a F^{p-1} ∇F / E
        coef = np.where(ok, np.exp(self.log_a + (p - 1.0) * np.where(ok, log_f, 0.0) - log_e), 0.0)
        grad_e = self.Gf.T @ (p * coef[:, None] * dF).ravel()

        q = self.Q @ u
        aq = np.abs(q)
        with np.errstate(divide="ignore"):
            log_q = np.log(aq)
        log_n = logsumexp(self.log_w + p * log_q)
        qok = aq > 0
        cq = np.where(qok, np.exp(self.log_w + (p - 1.0) * np.where(qok, log_q, 0.0) - log_n), 0.0)
        grad_n = self.Qf.T @ (p * cq * np.sign(q))
        grad = grad_e - grad_n
        if not metric:
            return log_e - log_n, grad, None

        # per-cell p a F^{p-2}[F ∇²F + (p-1) ∇F ∇Fᵀ] / E
        hf = self.F.hessian(gs)
        ce = np.where(ok, np.exp(self.log_a + (p - 2.0) * np.where(ok, log_f, 0.0) - log_e), 0.0)
        blocks = p * ce[:, None, None] * (fval[:, None, None] * hf
                                          + (p - 1.0) * dF[:, :, None] * dF[:, None, :])
        nc = len(blocks)
        idx = np.arange(nc * dim).reshape(nc, dim)
        rows = np.broadcast_to(idx[:, :, None], blocks.shape).ravel()
        cols = np.broadcast_to(idx[:, None, :], blocks.shape).ravel()
        b = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(nc * dim, nc * dim))
        h_e = self.Gf.T @ b @ self.Gf
        cn = np.where(qok, np.exp(self.log_w + (p - 2.0) * np.where(qok, log_q, 0.0) - log_n), 0.0)
        h_n = self.Qf.T @ sp.diags(p * (p - 1.0) * cn) @ self.Qf
        k, m = self.floor
        scale = 1e-10 * float(h_n.diagonal().sum())
        metric = h_e + h_n + scale * (k / float(k.diagonal().sum()) + m / float(m.diagonal().sum()))
        return log_e - log_n, grad, metric.tocsc()


def _descend(quot: _Quotient, x0, opts: SolverOptions, rtol=None):
    """Preconditioned descent on log J; returns (x, log J, trace, iterations, residual)."""
    rtol = opts.rtol if rtol is None else rtol
    log_j, y = quot.log_quotient(x0)
    y = y / np.max(np.abs(y))
    trace = [math.exp(log_j)]
    residual = math.inf
    for it in range(1, opts.max_iter + 1):
        _, grad, metric = quot.gradient_and_metric(y)
        try:
            d = spla.spsolve(metric, -grad)
        except RuntimeError:
            d = -grad
        slope = float(grad @ d)
        if not np.isfinite(slope) or slope >= 0:
            d, slope = -grad, -float(grad @ grad)
        t, accepted = 1.0, False
        while t > 1e-16:
            trial, y_trial = quot.log_quotient(y + t * d)
            if trial <= log_j + opts.armijo * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no decrease available at working precision
            if abs(slope) <= 1e-9:
                return y, log_j, trace, it, abs(slope)
            raise SolverError(f"line search failed with slope {slope:.3g}", trace=trace)
        log_j = trial
        y = y_trial / np.max(np.abs(y_trial))
        trace.append(math.exp(log_j))
        if len(trace) > opts.window:
            residual = (trace[-opts.window - 1] - trace[-1]) / trace[-1]
            if residual < rtol:
                return y, log_j, trace, it, residual
    raise SolverError(f"no convergence after {opts.max_iter} iterations", trace=trace)


def _problem(mesh: TriMesh, F: NormSpec, p, neumann):
    interp, w = mesh.quadrature
    free = None if neumann else mesh.interior_nodes
    return _Quotient(mesh.gradient_operator, mesh.areas, 2, interp, w, F, p, free, neumann)


def _linear_start(quot: _Quotient, F: NormSpec, rng, opts):
    """Eigenvector of the p = 2 problem for the quadratic part of F."""
    if isinstance(F, EllipseNorm):
        a = F.matrix
    else:
        a = np.eye(quot.dim)
    nc = len(quot.a)
    blocks = quot.a[:, None, None] * a[None]
    idx = np.arange(nc * quot.dim).reshape(nc, quot.dim)
    rows = np.broadcast_to(idx[:, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(idx[:, None, :], blocks.shape).ravel()
    b = sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(nc * quot.dim,) * 2)
    k = (quot.Gf.T @ b @ quot.Gf).tocsc()
    m = (quot.Qf.T @ sp.diags(quot.w) @ quot.Qf).tocsc()
    nev = 2 if quot.neumann else 1
    n = k.shape[0]
    if n <= 400:
        from scipy.linalg import eigh

        vals, vecs = eigh(k.toarray(), m.toarray())
    else:
        shift = -1e-3 * float(k.diagonal().mean() / m.diagonal().mean())
        v0 = np.random.default_rng(12345).standard_normal(n)
        vals, vecs = spla.eigsh(k, k=nev + 1, M=m, sigma=shift, which="LM", v0=v0)
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    x = vecs[:, nev - 1]
    x = x / np.max(np.abs(x))
    x = x + opts.perturbation * rng.standard_normal(n)
    return x, float(vals[nev - 1])


def _schedule(p):
    ps, q = [], 2.0
    while q < p:
        ps.append(q)
        q *= 2.0
    ps.append(float(p))
    return ps


def _result(quot, y, log_j, trace, its, residual, mesh, mode, bracket):
    u = quot.expand(y)
    # mean-normalised: (1/|Ω|) ∫ |u|^p = 1
    log_n = quot.log_norm(u) - math.log(mesh.total_area) if mesh is not None else quot.log_norm(u)
    u = u * math.exp(-log_n / quot.p)
    lam = math.exp(log_j / quot.p)
    fld = ScalarField(mesh, u) if mesh is not None else None
    return EigenResult(p=quot.p, lam=lam, field=fld, residual=float(residual), iterations=its,
                       constraint_defect=quot.constraint_defect(y) if quot.neumann else 0.0,
                       mode=mode, trace=trace, bracket=bracket, values=u)


def _check_norm(F: NormSpec, p):
    if getattr(F, "crystalline", False):
        raise ConfigError("crystalline norms violate the smoothness hypothesis of the solver")
    if not P_RANGE[0] <= p <= P_RANGE[1]:
        raise ConfigError(f"p must lie in [{P_RANGE[0]:g}, {P_RANGE[1]:g}]")


def _mesh_for(omega, h, mesh):
    if mesh is not None:
        return mesh
    if omega is None:
        raise ConfigError("need a domain or a mesh")
    return triangulate(omega, h)


def certificate(F: NormSpec, mesh: TriMesh, p, mode):
    """(lower, upper) bracket for lam ** p on this mesh.

    lower: (π_p / diam_F)^p; upper: the discrete quotient of explicit test
    functions (distance cones from the vertices for Neumann, the distance to
    the boundary for Dirichlet).
    """
    omega = mesh.domain
    diam = diameter(F, omega)[0]
    lower = (pi_p(p) / diam) ** p
    quot = _problem(mesh, F, p, mode == "neumann")
    Fo = F.polar()
    if mode == "neumann":
        cand = []
        for v in omega.vertices[:: max(1, len(omega.vertices) // 16)]:
            w = Fo.evaluate(mesh.nodes - v)
            cand.append(quot.log_quotient(w)[0])
        upper = math.exp(min(cand))
    else:
        w = boundary_distance(F, omega, mesh.nodes, method="halfplane")
        upper = math.exp(quot.log_quotient(w[mesh.interior_nodes])[0])
    return lower, upper


def _solve_chain(F, mesh, ps, mode, opts, rtol_final=True):
    rng = np.random.default_rng(opts.seed)
    neumann = mode == "neumann"
    target = sorted(set(float(p) for p in ps))
    for p in target:
        _check_norm(F, p)
    stages = sorted(set(_schedule(target[-1])) | set(target))
    quot = _problem(mesh, F, 2.0, neumann)
    x, _ = _linear_start(quot, F, rng, opts)
    out = {}
    for p in stages:
        q = quot.with_p(p)
        rtol = opts.rtol if p in target else opts.stage_rtol
        y, log_j, trace, its, res = _descend(q, x, opts, rtol)
        x = y
        if p in target:
            bracket = (0.0, math.inf)
            if opts.certify:
                bracket = certificate(F, mesh, p, mode)
            r = _result(q, y, log_j, trace, its, res, mesh, mode, bracket)
            lo, hi = bracket
            val = r.eigenvalue
            if opts.certify and not (lo * (1 - opts.certify_rtol) <= val <= hi * (1 + opts.certify_rtol)):
                raise SolverError(f"{mode} value {val:.6g} at p={p:g} outside certified bracket "
                                  f"[{lo:.6g}, {hi:.6g}]", trace=trace, result=r)
            out[p] = r
    return [out[float(p)] for p in ps]


def neumann_eigenvalue(F: NormSpec, omega: ConvexPolygon | None, p, h=None, opts=None, mesh=None):
    """Λ_p(Ω): p-th root of the first nontrivial Neumann eigenvalue."""
    opts = opts or SolverOptions()
    mesh = _mesh_for(omega, h, mesh)
    return _solve_chain(F, mesh, [p], "neumann", opts)[0]


def dirichlet_eigenvalue(F: NormSpec, omega: ConvexPolygon | None, p, h=None, opts=None, mesh=None):
    """λ_p(Ω): p-th root of the first Dirichlet eigenvalue."""
    opts = opts or SolverOptions()
    mesh = _mesh_for(omega, h, mesh)
    return _solve_chain(F, mesh, [p], "dirichlet", opts)[0]


def eigen_sweep(F: NormSpec, omega, ps, h=None, mode="neumann", opts=None, mesh=None):
    """One continuation chain through every exponent in ``ps``."""
    opts = opts or SolverOptions()
    mesh = _mesh_for(omega, h, mesh)
    return _solve_chain(F, mesh, ps, mode, opts)


def limit_eigenvalues(F: NormSpec, omega: ConvexPolygon):
    """(Λ_∞, λ_∞) = (2 / diam_F, 1 / inradius_F)."""
    return 2.0 / diameter(F, omega)[0], 1.0 / inradius(F, omega)[0]


# ---------------------------------------------------------------- 1D weighted problem

def unit_ball_measure(m):
    """ω_m, the volume of the unit ball of R^m (ω_0 = 1)."""
    return math.pi ** (m / 2.0) / gamma(m / 2.0 + 1.0)


@dataclass
class OneDProfile:
    ell: float
    n: int
    p: float
    eta: float
    f: np.ndarray
    s: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    constraint_defect: float = 0.0

    def weight(self, s=None):
        s = self.s if s is None else s
        return unit_ball_measure(self.n - 1) * np.abs(self.ell - s) ** (self.n - 1)

    def zeros(self):
        """Sign changes of f, located by linear interpolation."""
        f, s = self.f, self.s
        k = np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0)
        return s[k] - f[k] * (s[k + 1] - s[k]) / (f[k + 1] - f[k])

    def neumann_slopes(self):
        """One-sided second-order derivatives at -ℓ and ℓ."""
        f, dx = self.f, self.s[1] - self.s[0]
        left = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * dx)
        right = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * dx)
        return left, right

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "f"])
        for a, b in zip(self.s, self.f):
            w.writerow([f"{a:.9g}", f"{b:.9g}"])
        return buf.getvalue()


def _oned_quotient(ell, n, p, grid, gauss=4):
    s = np.linspace(-ell, ell, grid + 1)
    dx = s[1] - s[0]
    om = unit_ball_measure(n - 1)
    # exact ∫ g over each cell
    lo, hi = ell - s[:-1], ell - s[1:]
    a = om * (lo**n - hi**n) / n
    a = np.maximum(a, 1e-300)
    g = sp.diags([-np.ones(grid) / dx, np.ones(grid) / dx], [0, 1], shape=(grid, grid + 1))
    xg, wg = np.polynomial.legendre.leggauss(gauss)
    t = 0.5 * (xg + 1.0)
    rows = np.repeat(np.arange(grid * gauss), 2)
    cols = (np.arange(grid)[:, None, None] + np.array([0, 1])[None, None, :])
    cols = np.broadcast_to(cols, (grid, gauss, 2)).ravel()
    vals = np.broadcast_to(np.stack([1 - t, t], axis=1)[None], (grid, gauss, 2)).ravel()
    interp = sp.csr_matrix((vals, (rows, cols)), shape=(grid * gauss, grid + 1))
    sq = (s[:-1, None] + dx * t[None, :]).ravel()
    w = (0.5 * dx * wg)[None, :].repeat(grid, axis=0).ravel() * om * np.abs(ell - sq) ** (n - 1)
    w = np.maximum(w, 1e-300)
    return _Quotient(g, a, 1, interp, w, LqNorm(2.0), p, None, True), s


def oned_weighted_eigen(ell, n, p, grid=512, opts=None):
    """First nontrivial eigenpair of -(g|f'|^{p-2}f')' = η g |f|^{p-2} f on [-ℓ, ℓ].

    g(s) = ω_{n-1} |ℓ - s|^{n-1}, natural (Neumann) end conditions and the
    weighted constraint ∫ g |f|^{p-2} f = 0.
    """
    if n not in (1, 2, 3):
        raise ConfigError("weight dimension n must be 1, 2 or 3")
    if grid < 256:
        raise ConfigError("grid must have at least 256 cells")
    if not P_RANGE[0] <= p <= P_RANGE[1]:
        raise ConfigError(f"p must lie in [{P_RANGE[0]:g}, {P_RANGE[1]:g}]")
    opts = opts or SolverOptions()
    rng = np.random.default_rng(opts.seed)
    quot, s = _oned_quotient(ell, n, 2.0, grid)
    x, _ = _linear_start(quot, LqNorm(2.0), rng, opts)
    for q in _schedule(p):
        qq = quot.with_p(q)
        y, log_j, trace, its, res = _descend(qq, x, opts, opts.rtol if q == p else opts.stage_rtol)
        x = y
    f = y / np.max(np.abs(y))
    # orient so that f is positive at the heavy end s = -ℓ
    if f[0] < 0:
        f = -f
    return OneDProfile(ell=float(ell), n=int(n), p=float(p), eta=math.exp(log_j), f=f, s=s,
                       residual=float(res), iterations=its, constraint_defect=qq.constraint_defect(y))


# ---------------------------------------------------------------- spindle study

@dataclass
class SpindleRow:
    k: int
    diameter: float
    neumann: float
    upper: float
    gap: float
    strict: bool


def spindle_limit_study(F: NormSpec, d, p, ks, h, opts=None, wulff_sides=256):
    """Λ_p(Ω_k) against λ_p(W_{d/2}) for the spindle sequence Ω_k.

    Returns (rows, flags) where flags lists non-monotone gap steps.
    """
    from .convexgeom import spindle

    opts = opts or SolverOptions()
    wulff = wulff_polygon(F, 0.5 * d, wulff_sides)
    lam_w = dirichlet_eigenvalue(F, wulff, p, h, opts).lam
    diam_w = diameter(F, wulff)[0]
    rows = []
    for k in ks:
        om = spindle(F, k, d)
        diam = diameter(F, om)[0]
        lam = neumann_eigenvalue(F, om, p, h, opts).lam
        upper = lam_w * diam_w / diam
        rows.append(SpindleRow(k=int(k), diameter=diam, neumann=lam, upper=upper,
                               gap=upper - lam, strict=lam < upper))
    flags = [(a.k, b.k) for a, b in zip(rows, rows[1:]) if b.gap >= a.gap]
    return rows, flags
