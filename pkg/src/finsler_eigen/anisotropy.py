"""Anisotropic norms F, their polars F°, derivatives and Wulff shapes.

Every routine is vectorised over leading axes: ``xi`` has shape ``(..., d)``,
values come back with shape ``(...)``, gradients ``(..., d)`` and Hessians
``(..., d, d)``.  Norm objects are immutable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
N_BOUND_DIRECTIONS = 4096


def _flat(xi):
    xi = np.asarray(xi, dtype=float)
    return xi.reshape(-1, xi.shape[-1]), xi.shape[:-1]


def _require_nonzero(xi):
    if np.any(np.all(np.asarray(xi) == 0.0, axis=-1)):
        raise DomainError("derivative of a norm is undefined at the origin")


def _unit_circle(n):
    theta = 2.0 * np.pi * np.arange(n) / n
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def _check_rotation(a):
    a = np.asarray(a, dtype=float)
    if a.shape != (2, 2):
        raise ConfigError("rotation must be a 2x2 matrix")
    if not np.allclose(a.T @ a, np.eye(2), atol=1e-10) or abs(np.linalg.det(a) - 1.0) > 1e-10:
        raise ConfigError("rotation matrix must satisfy A^T A = I and det A = 1")
    return a


def rotation_matrix(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


class NormSpec:
    """Common interface of an admissible anisotropy."""

    crystalline = False

    def __call__(self, xi):
        return self.evaluate(xi)

    def evaluate(self, xi):
        raise NotImplementedError

    def gradient(self, xi):
        raise NotImplementedError

    def hessian(self, xi):
        raise NotImplementedError

    def polar(self) -> NormSpec:
        raise NotImplementedError

    def rotate(self, a) -> NormSpec:
        return RotatedNorm(self, _check_rotation(a))

    def to_json(self) -> dict:
        raise NotImplementedError

    @cached_property
    def _bounds(self):
        values = self.evaluate(_unit_circle(N_BOUND_DIRECTIONS))
        return float(values.min()), float(values.max())

    @property
    def alpha(self):
        """Smallest value of F on the unit circle (sampled)."""
        return self._bounds[0]

    @property
    def beta(self):
        return self._bounds[1]


@dataclass(frozen=True, eq=False)
class LqNorm(NormSpec):
    """F(ξ) = (Σ|ξ_i|^q)^{1/q}; q = 1 and q = inf are accepted as crystalline."""

    q: float = 2.0

    def __post_init__(self):
        q = float(self.q)
        if not q >= 1.0:
            raise ConfigError(f"Lq exponent must satisfy q >= 1, got {self.q}")
        object.__setattr__(self, "q", q)

    @property
    def crystalline(self):
        return self.q == 1.0 or math.isinf(self.q)

    def evaluate(self, xi):
        a = np.abs(np.asarray(xi, dtype=float))
        q = self.q
        if math.isinf(q):
            return a.max(axis=-1)
        if q == 1.0:
            return a.sum(axis=-1)
        if q == 2.0:
            return np.sqrt((a * a).sum(axis=-1))
        m = a.max(axis=-1, keepdims=True)
        safe = np.where(m > 0, m, 1.0)
        return m[..., 0] * (((a / safe) ** q).sum(axis=-1)) ** (1.0 / q)

    def gradient(self, xi):
        xi = np.asarray(xi, dtype=float)
        _require_nonzero(xi)
        q = self.q
        if q == 1.0:
            return np.sign(xi)
        if math.isinf(q):
            a = np.abs(xi)
            out = np.zeros_like(xi)
            idx = a.argmax(axis=-1)[..., None]
            np.put_along_axis(out, idx, np.take_along_axis(np.sign(xi), idx, -1), -1)
            return out
        f = self.evaluate(xi)[..., None]
        return np.sign(xi) * (np.abs(xi) / f) ** (q - 1.0)

    def hessian(self, xi):
        xi = np.asarray(xi, dtype=float)
        _require_nonzero(xi)
        q = self.q
        d = xi.shape[-1]
        if self.crystalline:
            return np.zeros(xi.shape + (d,))
        f = self.evaluate(xi)[..., None]
        g = self.gradient(xi)
        with np.errstate(divide="ignore"):
            diag = (np.abs(xi) / f) ** (q - 2.0)
        h = diag[..., :, None] * np.eye(d) - g[..., :, None] * g[..., None, :]
        return (q - 1.0) / f[..., None] * h

    def polar(self):
        q = self.q
        if q == 1.0:
            return LqNorm(math.inf)
        if math.isinf(q):
            return LqNorm(1.0)
        return LqNorm(q / (q - 1.0))

    def to_json(self):
        return {"kind": "lq", "q": self.q if math.isfinite(self.q) else "inf"}


@dataclass(frozen=True, eq=False)
class EllipseNorm(NormSpec):
    """F(ξ) = sqrt(ξᵀ M ξ) for a symmetric positive-definite M."""

    m: tuple

    def __post_init__(self):
        mat = np.asarray(self.m, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ConfigError("ellipse matrix must be square")
        if not np.allclose(mat, mat.T, rtol=0, atol=1e-12 * max(1.0, np.abs(mat).max())):
            raise ConfigError("ellipse matrix must be symmetric")
        if np.linalg.eigvalsh(mat).min() <= 0:
            raise ConfigError("ellipse matrix must be positive definite")
        mat = 0.5 * (mat + mat.T)
        object.__setattr__(self, "m", tuple(map(tuple, mat.tolist())))

    @cached_property
    def matrix(self):
        return np.array(self.m)

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        quad = np.einsum("...i,ij,...j->...", xi, self.matrix, xi)
        return np.sqrt(np.maximum(quad, 0.0))

    def gradient(self, xi):
        xi = np.asarray(xi, dtype=float)
        _require_nonzero(xi)
        return (xi @ self.matrix) / self.evaluate(xi)[..., None]

    def hessian(self, xi):
        xi = np.asarray(xi, dtype=float)
        _require_nonzero(xi)
        f = self.evaluate(xi)[..., None, None]
        mx = xi @ self.matrix
        return self.matrix / f - mx[..., :, None] * mx[..., None, :] / f**3

    def polar(self):
        return EllipseNorm(np.linalg.inv(self.matrix))

    def rotate(self, a):
        a = _check_rotation(a)
        return EllipseNorm(a.T @ self.matrix @ a)

    def to_json(self):
        return {"kind": "ellipse", "m": [list(row) for row in self.m]}


@dataclass(frozen=True, eq=False)
class SmoothedPolytopeNorm(NormSpec):
    """Log-sum-exp smoothing of max_i |d_i·ξ|.

    F(ξ)² = δ|ξ|² log Σ_i exp((d_i·ξ)² / (δ|ξ|²)).  The right side is the
    perspective of a convex, increasing function, hence convex and
    2-homogeneous, so F is a smooth gauge that tends to the polytope norm as
    δ -> 0.
    """

    dirs: tuple
    delta: float = 0.05

    def __post_init__(self):
        d = np.asarray(self.dirs, dtype=float)
        if d.ndim != 2 or d.shape[1] != 2 or len(d) < 2:
            raise ConfigError("smoothed polytope needs at least two 2D directions")
        if np.linalg.matrix_rank(d) < 2:
            raise ConfigError("smoothed polytope directions must span the plane")
        if not float(self.delta) > 0:
            raise ConfigError("smoothing parameter delta must be positive")
        object.__setattr__(self, "dirs", tuple(map(tuple, d.tolist())))
        object.__setattr__(self, "delta", float(self.delta))

    @cached_property
    def directions(self):
        return np.array(self.dirs)

    def _square(self, xi, order):
        # returns m = F^2 and, on request, its gradient and Hessian
        x, shape = _flat(xi)
        dmat, delta = self.directions, self.delta
        r = (x * x).sum(axis=1)
        nz = r > 0
        rs = np.where(nz, r, 1.0)
        a = x @ dmat.T
        y = a * a / (delta * rs[:, None])
        lse = logsumexp(y, axis=1)
        m = np.where(nz, delta * r * lse, 0.0)
        if order == 0:
            return m.reshape(shape)
        w = np.exp(y - lse[:, None])
        s = np.einsum("nk,nk,ki->ni", w, a, dmat)
        t = (w * a * a).sum(axis=1)
        grad = 2.0 * delta * lse[:, None] * x + 2.0 * s - 2.0 * (t / rs)[:, None] * x
        if order == 1:
            return m.reshape(shape), grad.reshape(shape + (2,))
        gy = (2.0 * a[:, :, None] * dmat[None] / (delta * rs[:, None, None])
              - 2.0 * (a * a)[:, :, None] * x[:, None, :] / (delta * rs[:, None, None] ** 2))
        gl = np.einsum("nk,nki->ni", w, gy)
        gw = w[:, :, None] * (gy - gl[:, None, :])
        ds = np.einsum("nk,ki,kj->nij", w, dmat, dmat) + np.einsum("nk,ki,nkj->nij", a, dmat, gw)
        dt = 2.0 * s + np.einsum("nk,nkj->nj", a * a, gw)
        eye = np.eye(2)
        hess = (2.0 * delta * lse[:, None, None] * eye
                + 2.0 * delta * x[:, :, None] * gl[:, None, :]
                + 2.0 * ds
                - 2.0 * x[:, :, None] * dt[:, None, :] / rs[:, None, None]
                + 4.0 * (t / rs**2)[:, None, None] * x[:, :, None] * x[:, None, :]
                - 2.0 * (t / rs)[:, None, None] * eye)
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        return m.reshape(shape), grad.reshape(shape + (2,)), hess.reshape(shape + (2, 2))

    def evaluate(self, xi):
        return np.sqrt(np.maximum(self._square(xi, 0), 0.0))

    def gradient(self, xi):
        _require_nonzero(xi)
        m, gm = self._square(xi, 1)
        return gm / (2.0 * np.sqrt(m))[..., None]

    def hessian(self, xi):
        _require_nonzero(xi)
        m, gm, hm = self._square(xi, 2)
        f = np.sqrt(m)[..., None, None]
        return hm / (2.0 * f) - gm[..., :, None] * gm[..., None, :] / (4.0 * f**3)

    def polar(self):
        return PolarNorm(self)

    def to_json(self):
        return {"kind": "smoothed_polytope", "dirs": [list(d) for d in self.dirs],
                "delta": self.delta}


@dataclass(frozen=True, eq=False)
class PolarNorm(NormSpec):
    """F°(v) = sup ξ·v / F(ξ), evaluated numerically over the unit circle.

    The maximising angle is bracketed on a 64-point scan, narrowed by golden
    section and polished with Newton steps.  The gradient is the maximiser
    rescaled to F = 1; the Hessian follows from differentiating the
    optimality system v = F°(v) ∇F(ζ), F(ζ) = 1.
    """

    base: NormSpec
    scan: int = 64
    golden_iters: int = 30
    newton_iters: int = 4

    @cached_property
    def _scan_table(self):
        theta = 2.0 * np.pi * np.arange(self.scan) / self.scan
        u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return theta, u, self.base.evaluate(u)

    def _ratio(self, v, theta):
        u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return (u * v).sum(axis=-1) / self.base.evaluate(u)

    def _maximiser(self, v):
        theta0, u0, f0 = self._scan_table
        k = np.argmax((v @ u0.T) / f0, axis=1)
        half = 2.0 * np.pi / self.scan
        lo, hi = theta0[k] - half, theta0[k] + half
        c = hi - GOLDEN * (hi - lo)
        d = lo + GOLDEN * (hi - lo)
        fc, fd = self._ratio(v, c), self._ratio(v, d)
        for _ in range(self.golden_iters):
            left = fc > fd
            hi = np.where(left, d, hi)
            lo = np.where(left, lo, c)
            new = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
            fnew = self._ratio(v, new)
            d, fd, c, fc = (np.where(left, c, new), np.where(left, fc, fnew),
                            np.where(left, new, d), np.where(left, fnew, fd))
        theta = 0.5 * (lo + hi)
        if self.base.crystalline:
            return theta
        for _ in range(self.newton_iters):
            u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
            up = np.stack([-u[:, 1], u[:, 0]], axis=-1)
            phi = (v * u).sum(axis=1)
            dphi = (v * up).sum(axis=1)
            psi = self.base.evaluate(u)
            g = self.base.gradient(u)
            h = self.base.hessian(u)
            dpsi = (g * up).sum(axis=1)
            d2psi = np.einsum("ni,nij,nj->n", up, h, up) - psi
            num = dphi * psi - phi * dpsi
            d1 = num / psi**2
            d2 = (-phi * psi - phi * d2psi) / psi**2 - 2.0 * dpsi * num / psi**3
            # golden section already sits inside the quadratic basin; clip guards flat faces
            ok = d2 < 0
            step = np.where(ok, d1 / np.where(ok, d2, -1.0), 0.0)
            theta = theta - np.clip(step, -1e-4, 1e-4)
        return theta

    def _solve(self, v):
        x, shape = _flat(v)
        nz = np.any(x != 0.0, axis=1)
        theta = np.zeros(len(x))
        if nz.any():
            theta[nz] = self._maximiser(x[nz])
        return x, shape, nz, theta

    def evaluate(self, v):
        x, shape, nz, theta = self._solve(v)
        out = np.zeros(len(x))
        if nz.any():
            out[nz] = self._ratio(x[nz], theta[nz])
        return out.reshape(shape)

    def _touching_point(self, x, theta):
        u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return u / self.base.evaluate(u)[:, None]

    def gradient(self, v):
        _require_nonzero(v)
        x, shape, _, theta = self._solve(v)
        return self._touching_point(x, theta).reshape(shape + (2,))

    def hessian(self, v):
        _require_nonzero(v)
        x, shape, _, theta = self._solve(v)
        zeta = self._touching_point(x, theta)
        mu = (zeta * x).sum(axis=1)
        g = self.base.gradient(zeta)
        h = self.base.hessian(zeta)
        n = len(x)
        system = np.zeros((n, 3, 3))
        system[:, :2, :2] = mu[:, None, None] * h
        system[:, :2, 2] = g
        system[:, 2, :2] = g
        rhs = np.zeros((n, 3, 2))
        rhs[:, 0, 0] = rhs[:, 1, 1] = 1.0
        jac = np.linalg.solve(system, rhs)[:, :2, :]
        jac = 0.5 * (jac + np.swapaxes(jac, 1, 2))
        return jac.reshape(shape + (2, 2))

    def polar(self):
        return self.base

    def to_json(self):
        out = dict(self.base.to_json())
        out["role"] = "polar"
        return out


@dataclass(frozen=True, eq=False)
class RotatedNorm(NormSpec):
    """F_A(x) = F(A x) for a rotation A."""

    base: NormSpec
    a: np.ndarray

    @property
    def crystalline(self):
        return self.base.crystalline

    def evaluate(self, xi):
        return self.base.evaluate(np.asarray(xi, dtype=float) @ self.a.T)

    def gradient(self, xi):
        return self.base.gradient(np.asarray(xi, dtype=float) @ self.a.T) @ self.a

    def hessian(self, xi):
        h = self.base.hessian(np.asarray(xi, dtype=float) @ self.a.T)
        return self.a.T @ h @ self.a

    def polar(self):
        return RotatedNorm(self.base.polar(), self.a)

    def rotate(self, a):
        return RotatedNorm(self.base, self.a @ _check_rotation(a))

    def to_json(self):
        return {"kind": "rotated", "a": self.a.tolist(), "base": self.base.to_json()}


def norm_from_json(obj) -> NormSpec:
    """Build a norm from its JSON object; ``"role": "polar"`` yields the polar."""
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError(f"norm spec must be an object with a 'kind' field: {obj!r}")
    kind = obj["kind"]
    try:
        if kind == "lq":
            q = obj.get("q", 2.0)
            spec = LqNorm(math.inf if q in ("inf", "infinity") else float(q))
        elif kind == "ellipse":
            spec = EllipseNorm(obj["m"])
        elif kind == "smoothed_polytope":
            spec = SmoothedPolytopeNorm(obj["dirs"], obj.get("delta", 0.05))
        elif kind == "rotated":
            spec = norm_from_json(obj["base"]).rotate(obj["a"])
        else:
            raise ConfigError(f"unknown norm kind {kind!r}")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed norm spec {obj!r}: {exc}") from exc
    role = obj.get("role", "primal")
    if role in ("polar", "polar-of"):
        return spec.polar()
    if role != "primal":
        raise ConfigError(f"unknown norm role {role!r}")
    return spec


def evaluate(spec: NormSpec, xi):
    return spec.evaluate(xi)


def polar(spec: NormSpec) -> NormSpec:
    return spec.polar()


def numeric_polar(spec: NormSpec) -> NormSpec:
    """Polar computed by the numerical route even where a closed form exists."""
    return PolarNorm(spec)


def gradient(spec: NormSpec, xi):
    return spec.gradient(xi)


def hessian(spec: NormSpec, xi):
    return spec.hessian(xi)


def gradient_of_power(spec: NormSpec, p, xi):
    """F^{p-1}(ξ) ∇F(ξ), extended by 0 at ξ = 0 (p > 1)."""
    if not p > 1:
        raise DomainError("gradient_of_power needs p > 1")
    x, shape = _flat(xi)
    out = np.zeros_like(x)
    nz = np.any(x != 0.0, axis=1)
    if nz.any():
        f = spec.evaluate(x[nz])
        out[nz] = f[:, None] ** (p - 1.0) * spec.gradient(x[nz])
    return out.reshape(shape + (x.shape[1],))


def hessian_of_power(spec: NormSpec, p, xi):
    """Hessian of F^p / p: F^{p-1}∇²F + (p-1)F^{p-2}∇F∇Fᵀ (0 at the origin for p > 2)."""
    x, shape = _flat(xi)
    d = x.shape[1]
    out = np.zeros((len(x), d, d))
    nz = np.any(x != 0.0, axis=1)
    if nz.any():
        f = spec.evaluate(x[nz])[:, None, None]
        g = spec.gradient(x[nz])
        h = spec.hessian(x[nz])
        out[nz] = f ** (p - 1.0) * h + (p - 1.0) * f ** (p - 2.0) * g[:, :, None] * g[:, None, :]
    return out.reshape(shape + (d, d))


def rotate(spec: NormSpec, a) -> NormSpec:
    return spec.rotate(a)


def wulff_radial(spec: NormSpec, theta):
    """Radius of the unit Wulff shape {F° < 1} in direction theta."""
    theta = np.asarray(theta, dtype=float)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return 1.0 / spec.polar().evaluate(u)


def wulff_measure(spec: NormSpec, rtol=1e-6) -> float:
    """Area κ₂ of {F° < 1} by adaptive refinement of an inscribed polygon.

    Each angular interval contributes the triangle spanned with the origin;
    intervals whose chord misses more than ``1e-2 * rtol`` of the area are
    bisected.  Settled intervals add the parabolic cap estimate (4/3 of the
    inscribed triangle on the chord).
    """
    a = 2.0 * np.pi * np.arange(64) / 64
    b = np.append(a[1:], 2.0 * np.pi)
    ra = wulff_radial(spec, a)
    rb = np.roll(ra, -1)
    scale = 0.5 * np.mean(ra**2) * 2.0 * np.pi
    total = 0.0
    for _ in range(80):
        mid = 0.5 * (a + b)
        rm = wulff_radial(spec, mid)
        pa = ra[:, None] * np.stack([np.cos(a), np.sin(a)], axis=-1)
        pb = rb[:, None] * np.stack([np.cos(b), np.sin(b)], axis=-1)
        pm = rm[:, None] * np.stack([np.cos(mid), np.sin(mid)], axis=-1)
        tri = 0.5 * (pa[:, 0] * pb[:, 1] - pa[:, 1] * pb[:, 0])
        e, w = pb - pa, pm - pa
        # midpoint lies right of a counter-clockwise chord when the boundary bulges out
        gain = 0.5 * (e[:, 1] * w[:, 0] - e[:, 0] * w[:, 1])
        split = gain > 1e-2 * rtol * scale
        total += float(np.sum(tri[~split] + 4.0 / 3.0 * gain[~split]))
        if not split.any():
            return total
        a, b, ra, rb, mid, rm = a[split], b[split], ra[split], rb[split], mid[split], rm[split]
        a, b = np.concatenate([a, mid]), np.concatenate([mid, b])
        ra, rb = np.concatenate([ra, rm]), np.concatenate([rm, rb])
    raise RuntimeError("Wulff area refinement did not settle")


@dataclass(frozen=True, eq=False)
class WulffShape:
    """W_r(x0) = {x : F°(x - x0) < r} generated by ``norm``."""

    center: tuple
    radius: float
    norm: NormSpec

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError("Wulff radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return self.norm.polar().evaluate(x - np.array(self.center)) < self.radius

    def measure(self):
        return wulff_measure(self.norm) * self.radius**2

    def polygon(self, sides=256):
        from .convexgeom import wulff_polygon

        return wulff_polygon(self.norm, self.radius, sides, self.center)
