"""Distribution functions and rearrangements of piecewise-linear fields."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .anisotropy import NormSpec, wulff_measure
from .errors import DomainError, KinkError
from .fem import ScalarField

KINK_RTOL = 0.1


def _superlevel_fraction(v, t):
    """Fraction of each triangle where the linear interpolant of v exceeds t."""
    v = np.sort(v, axis=1)
    v0, v1, v2 = v[:, 0], v[:, 1], v[:, 2]
    out = np.zeros(len(v))
    out[t < v0] = 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = (v1 <= t) & (t < v2)
        out[upper] = ((v2 - t) ** 2 / ((v2 - v0) * (v2 - v1)))[upper]
        lower = (v0 <= t) & (t < v1)
        out[lower] = (1.0 - (t - v0) ** 2 / ((v1 - v0) * (v2 - v0)))[lower]
    return out


def distribution(u: ScalarField, t):
    """μ(t) = |{|u| > t}| with exact level-line cuts of every triangle."""
    if t < 0:
        raise DomainError("distribution is defined for t >= 0")
    v = u.values[u.mesh.triangles]
    frac = _superlevel_fraction(v, t) + _superlevel_fraction(-v, t)
    return float(u.mesh.areas @ frac)


@dataclass(frozen=True)
class MonotoneProfile:
    """Piecewise-linear non-increasing profile s -> u*(s) on [0, |Ω|]."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.shape != v.shape or k.ndim != 1 or len(k) < 2:
            raise ValueError("knots and values must be matching 1D arrays")
        if k[0] != 0.0 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must increase strictly from 0")
        if np.any(np.diff(v) > 1e-12 * max(1.0, float(np.max(np.abs(v))))):
            raise ValueError("profile values must be non-increasing")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, fn, total, resolution=512):
        s = np.linspace(0.0, total, resolution + 1)
        return cls(s, np.asarray(fn(s), dtype=float))

    @property
    def total(self):
        return float(self.knots[-1])

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if np.any((s < 0) | (s > self.total * (1 + 1e-12))):
            raise DomainError("measure outside [0, |Ω|]")
        return np.interp(s, self.knots, self.values)

    def one_sided_slopes(self, s):
        slopes = np.diff(self.values) / np.diff(self.knots)
        k = int(np.searchsorted(self.knots, s, side="right")) - 1
        k = min(max(k, 0), len(slopes) - 1)
        on_knot = np.isclose(s, self.knots[k], rtol=0, atol=1e-12 * self.total)
        left = slopes[k - 1] if on_knot and k > 0 else slopes[k]
        return float(left), float(slopes[k])

    def derivative(self, s):
        """u*'(s); raises KinkError where one-sided slopes disagree."""
        left, right = self.one_sided_slopes(s)
        if abs(left - right) > KINK_RTOL * max(abs(left), abs(right)) + 1e-12:
            raise KinkError(f"profile has a kink at s={s:.6g} (slopes {left:.6g}, {right:.6g})")
        return 0.5 * (left + right)

    def lp_norm(self, p):
        """(∫_0^|Ω| |u*|^p ds)^{1/p}, exact for the piecewise-linear profile."""
        a, b = np.abs(self.values[:-1]), np.abs(self.values[1:])
        ds = np.diff(self.knots)
        same = np.isclose(a, b, rtol=1e-10, atol=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            seg = np.where(same, ds * a**p,
                           ds * (b ** (p + 1) - a ** (p + 1)) / ((p + 1) * (b - a)))
        return float(seg.sum()) ** (1.0 / p)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "u_star"])
        for s, v in zip(self.knots, self.values):
            w.writerow([f"{s:.9g}", f"{v:.9g}"])
        return buf.getvalue()


def decreasing_rearrangement(u: ScalarField, resolution=512) -> MonotoneProfile:
    """u*(s) = sup{t > 0 : μ(t) > s}, sampled at quantiles of |u|."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    a = np.abs(u.values)
    total = u.mesh.total_area
    top, bottom = float(a.max()), float(a.min())
    levels = np.unique(np.concatenate([np.quantile(a, np.linspace(0.0, 1.0, resolution)),
                                       np.linspace(bottom, top, resolution)]))
    s = np.array([distribution(u, t) for t in levels])
    # μ(max) = 0 and μ(t) = |Ω| just below min |u|
    s = np.append(s, total)
    t = np.append(levels, bottom)
    order = np.lexsort((-t, s))
    s, t = s[order], t[order]
    keep = np.concatenate([[True], np.diff(s) > 1e-14 * total])
    s, t = s[keep], t[keep]
    s[0] = 0.0
    t = np.minimum.accumulate(t)
    return MonotoneProfile(s, t)


def convex_rearrangement(u, F: NormSpec, x, kappa=None):
    """u^#(x) = u*(κ₂ F°(x)²) on the Wulff ball of the same measure."""
    profile = u if isinstance(u, MonotoneProfile) else decreasing_rearrangement(u)
    kappa = wulff_measure(F) if kappa is None else kappa
    s = kappa * F.polar().evaluate(np.asarray(x, dtype=float)) ** 2
    if np.any(s > profile.total * (1 + 1e-12)):
        raise DomainError("point lies outside the rearranged Wulff ball")
    return profile(np.minimum(s, profile.total))


def radial_gradient_identities(profile: MonotoneProfile, F: NormSpec, x, kappa=None):
    """(∇u^#(x), F(∇u^#(x)), ∇F(∇u^#(x))) from the closed forms in 2D.

    ∇u^# = u*'(s) 2κ F°(x) ∇F°(x) with s = κF°(x)², so F(∇u^#) = -u*'(s) 2κ F°(x)
    and, since u*' <= 0 and ∇F is odd, ∇F(∇u^#) = -x / F°(x).
    """
    x = np.asarray(x, dtype=float)
    Fo = F.polar()
    r = float(Fo.evaluate(x))
    if r == 0.0:
        raise DomainError("identities need x != 0")
    kappa = wulff_measure(F) if kappa is None else kappa
    s = kappa * r * r
    if s > profile.total * (1 + 1e-12):
        raise DomainError("point lies outside the rearranged Wulff ball")
    d = profile.derivative(min(s, profile.total))
    if d == 0.0:
        raise DomainError("∇u^# vanishes here, so ∇F(∇u^#) is undefined")
    grad = d * 2.0 * kappa * r * Fo.gradient(x)
    return grad, -d * 2.0 * kappa * r, -x / r
