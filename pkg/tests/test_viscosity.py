import math

import numpy as np
import pytest
import sympy as sym

from finsler_eigen.anisotropy import EllipseNorm, LqNorm
from finsler_eigen.convexgeom import ConvexPolygon, diameter
from finsler_eigen.errors import DomainError
from finsler_eigen.fem import ScalarField, triangulate
from finsler_eigen.viscosity import (Cone, Constant, Expression, Jet, QuadraticBarrier, SqrtBarrier, Tabulated,
                                     cone_pair, finsler_laplacian, g_p_residual, neumann_flux, operator_A,
                                     operator_B, q_infinity, q_infinity_eig, q_infinity_jet, residual_scan, sample)

SQUARE = ConvexPolygon([[0, 0], [1, 0], [1, 1], [0, 1]])
NORMS = {"l2": LqNorm(2.0), "l4": LqNorm(4.0), "ellipse": EllipseNorm([[4.0, 0.0], [0.0, 1.0]])}


def random_points(rng, n, center):
    z = rng.standard_normal((n, 2))
    return center + z * rng.uniform(0.1, 2.0, (n, 1)) / np.linalg.norm(z, axis=1)[:, None]


@pytest.mark.parametrize("name", sorted(NORMS))
def test_cone_q_infinity_vanishes(name, rng):
    F = NORMS[name]
    c = Cone(np.array([0.2, -0.1]), 1.7, 0.4)
    for x in random_points(rng, 1000, c.center):
        assert abs(q_infinity(F, c, x)) <= 1e-10


@pytest.mark.parametrize("name", sorted(NORMS))
def test_quadratic_barrier_identity(name, rng):
    F = NORMS[name]
    for _ in range(50):
        g = QuadraticBarrier(rng.standard_normal(2), rng.uniform(0.01, 0.5), rng.uniform(0.1, 2.0))
        x = random_points(rng, 1, g.center)[0]
        j = g.jet(F, x)
        assert -q_infinity(F, g, x) == pytest.approx(2 * g.gam * F.evaluate(j.grad) ** 2, rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("name", sorted(NORMS))
def test_q_infinity_two_ways(name, rng):
    F = NORMS[name]
    for _ in range(200):
        h = rng.standard_normal((2, 2))
        j = Jet(rng.standard_normal(), rng.standard_normal(2), h + h.T)
        assert q_infinity_jet(F, j) == pytest.approx(q_infinity_eig(F, j), rel=1e-9, abs=1e-12)


def test_q_infinity_zero_gradient_convention():
    j = Jet(1.0, np.zeros(2), np.eye(2))
    assert q_infinity(LqNorm(2), j, np.zeros(2)) == 0.0


def test_singular_point_is_domain_error():
    c = Cone(np.zeros(2), 1.0)
    with pytest.raises(DomainError):
        q_infinity(LqNorm(2), c, np.zeros(2))


def _sympy_jet(xs, u_expr, x):
    sub = dict(zip(xs, x))
    grad = [sym.diff(u_expr, v) for v in xs]
    hess = [[sym.diff(g, v) for v in xs] for g in grad]
    return (float(u_expr.subs(sub)), np.array([float(g.subs(sub)) for g in grad]),
            np.array([[float(e.subs(sub)) for e in row] for row in hess]))


def test_sqrt_barrier_jet_against_sympy():
    # Ellipse(diag(4,1)) has polar sqrt(x²/4 + y²)
    x1, x2 = sym.symbols("x1 x2", real=True)
    r, top, bot = 0.7, 1.3, -0.4
    rho = sym.sqrt((x1 - 0.1) ** 2 / 4 + (x2 + 0.2) ** 2)
    phi = top - (top - bot) * sym.sqrt(rho / r)
    c = SqrtBarrier(np.array([0.1, -0.2]), r, top, bot)
    x = np.array([0.6, 0.3])
    u, g, h = _sympy_jet((x1, x2), phi, x)
    j = c.jet(NORMS["ellipse"], x)
    assert j.u == pytest.approx(u, rel=1e-12)
    np.testing.assert_allclose(j.grad, g, rtol=1e-11)
    np.testing.assert_allclose(j.hess, h, rtol=1e-10)


@pytest.mark.parametrize("name", sorted(NORMS))
def test_sqrt_barrier_radial_value(name, rng):
    # at F°(x - x̄) = r: φ' = -Δ/(2r), φ'' = Δ/(4r²), hence Q_∞ = φ'²φ'' = Δ³/(16 r⁴)
    F = NORMS[name]
    for _ in range(50):
        r = rng.uniform(0.2, 3.0)
        top, bot = rng.uniform(0.5, 2.0), rng.uniform(-2.0, 0.4)
        c = SqrtBarrier(rng.standard_normal(2), r, top, bot)
        z = rng.standard_normal(2)
        x = c.center + r * z / F.polar().evaluate(z)
        assert q_infinity(F, c, x) == pytest.approx((top - bot) ** 3 / (16 * r**4), rel=1e-8)


@pytest.mark.parametrize("name", sorted(NORMS))
def test_sqrt_barrier_flux_at_tangency(name, rng):
    F = NORMS[name]
    c = SqrtBarrier(np.array([0.5, 0.5]), 0.3, 1.0, 0.0)
    for nu, x in (([1.0, 0.0], [1.0, 0.4]), ([0.0, -1.0], [0.7, 0.0])):
        z = np.array(x) - c.center
        expected = -(z / F.polar().evaluate(z)) @ np.array(nu)
        assert neumann_flux(F, c, x, nu) == pytest.approx(expected, rel=1e-10)
        assert expected < 0


@pytest.mark.parametrize("name", sorted(NORMS))
def test_quadratic_barrier_flux_sign(name, rng):
    F = NORMS[name]
    x0 = np.array([0.4, 0.55])
    g = QuadraticBarrier(x0, 0.1, 0.2)
    for nu, pts in (([1, 0], [[1.0, t] for t in np.linspace(0, 1, 9)]),
                    ([0, -1], [[t, 0.0] for t in np.linspace(0, 1, 9)])):
        for x in pts:
            z = np.array(x) - x0
            val = neumann_flux(F, g, x, nu)
            assert val == pytest.approx((z / F.polar().evaluate(z)) @ np.array(nu, float), rel=1e-10)
            assert val >= 0


def test_operator_examples():
    F = LqNorm(2)
    # cone with slope Λ·peak evaluated at the peak height
    lam = 2.0
    c = Cone(np.zeros(2), lam * 1.5, 1.5 + lam * 1.5 * 0.5)
    x = np.array([0.5, 0.0])
    assert c.jet(F, x).u == pytest.approx(1.5)
    assert operator_A(F, c, x, lam) == pytest.approx(0.0, abs=1e-12)
    assert operator_A(F, Constant(0.0), x, lam) == 0.0
    g = QuadraticBarrier(np.zeros(2), 0.1, 0.5)
    xg = np.array([1.0, 0.0])
    assert g.jet(F, xg).u > F.evaluate(g.jet(F, xg).grad)
    assert operator_A(F, g, xg, 1.0) < 0
    assert operator_B(F, Constant(-1.0), x, 1.0) == pytest.approx(1.0)


def test_finsler_laplacian_euclidean():
    # F = |.| gives the ordinary Laplacian
    e = Expression(lambda x: x[0] ** 2 + 3 * x[1] ** 2, lambda x: np.array([2 * x[0], 6 * x[1]]),
                   lambda x: np.diag([2.0, 6.0]))
    assert finsler_laplacian(LqNorm(2), e, np.array([0.3, 0.2])) == pytest.approx(8.0)
    with pytest.raises(DomainError):
        finsler_laplacian(LqNorm(2), e, np.zeros(2))


def test_finsler_laplacian_against_divergence(rng):
    # Δ_F u = div(F(∇u)∇F(∇u)) by central differences of the flux field
    F = NORMS["ellipse"]
    e = Expression(lambda x: math.sin(x[0]) * math.exp(x[1]),
                   lambda x: np.array([math.cos(x[0]) * math.exp(x[1]), math.sin(x[0]) * math.exp(x[1])]),
                   lambda x: np.array([[-math.sin(x[0]) * math.exp(x[1]), math.cos(x[0]) * math.exp(x[1])],
                                       [math.cos(x[0]) * math.exp(x[1]), math.sin(x[0]) * math.exp(x[1])]]))

    def flux(x):
        g = e.grad(x)
        return F.evaluate(g) * F.gradient(g)

    h = 1e-5
    for x in rng.uniform(0.2, 1.0, (10, 2)):
        div = sum((flux(x + h * d)[i] - flux(x - h * d)[i]) / (2 * h) for i, d in enumerate(np.eye(2)))
        assert finsler_laplacian(F, e, x) == pytest.approx(div, rel=1e-6)


@pytest.mark.parametrize("fn,grad,hess,lam2", [
    (lambda x: math.sin(math.pi * x[0]),
     lambda x: np.array([math.pi * math.cos(math.pi * x[0]), 0.0]),
     lambda x: np.array([[-math.pi**2 * math.sin(math.pi * x[0]), 0.0], [0.0, 0.0]]), math.pi**2),
    (lambda x: math.cos(math.pi * x[0]) * math.cos(math.pi * x[1]),
     lambda x: -math.pi * np.array([math.sin(math.pi * x[0]) * math.cos(math.pi * x[1]),
                                    math.cos(math.pi * x[0]) * math.sin(math.pi * x[1])]),
     lambda x: math.pi**2 * np.array(
         [[-math.cos(math.pi * x[0]) * math.cos(math.pi * x[1]), math.sin(math.pi * x[0]) * math.sin(math.pi * x[1])],
          [math.sin(math.pi * x[0]) * math.sin(math.pi * x[1]), -math.cos(math.pi * x[0]) * math.cos(math.pi * x[1])]]),
     2 * math.pi**2),
])
def test_g2_vanishes_on_classical_eigenfunctions(fn, grad, hess, lam2, rng):
    e = Expression(fn, grad, hess)
    for x in rng.uniform(0.05, 0.95, (50, 2)):
        assert abs(g_p_residual(LqNorm(2), e, x, 2.0, math.sqrt(lam2))) <= 1e-6


def test_g_p_constant_and_cone():
    for p in (2.0, 4.0, 8.0):
        assert g_p_residual(LqNorm(2), Constant(0.5), np.zeros(2), p, 1.3) == pytest.approx(
            -(1.3**p) * 0.5 ** (p - 1))
    c = Cone(np.zeros(2), 1.0, 2.0)
    x = np.array([0.3, 0.4])
    assert q_infinity(LqNorm(2), c, x) == pytest.approx(0.0, abs=1e-14)


def test_flux_of_constant_is_domain_error():
    with pytest.raises(DomainError):
        neumann_flux(LqNorm(2), Constant(1.0), np.array([1.0, 0.5]), [1, 0])


def test_sample_record():
    s = sample(LqNorm(2), QuadraticBarrier(np.zeros(2), 0.1, 0.5), np.array([1.0, 0.0]), 1.0, nu=[1, 0])
    assert s.flux == pytest.approx(1.0)
    assert s.q_inf == pytest.approx(-2 * 0.5 * s.f_grad**2)


def test_scan_of_constant_reports_violation():
    rep = residual_scan(LqNorm(2), SQUARE, Constant(1.0), 2.0, n=6)
    assert rep.max_violation == pytest.approx(2.0)
    assert all(v["branch"] == "A" for v in rep.violations)
    js = rep.to_json()
    assert set(js) == {"violations", "max_violation", "samples"}


@pytest.mark.parametrize("name", ["l2", "ellipse"])
def test_cone_pair_on_diameter_segment(name):
    F = NORMS[name]
    diam, a, b = diameter(F, SQUARE)
    u = cone_pair(F, a, b)
    lam = 2.0 / diam
    t = np.linspace(0.05, 0.95, 19)
    seg = a + t[:, None] * (b - a)
    # both branches vanish along the segment joining the two centers
    rep = residual_scan(F, SQUARE, u, lam, points=seg, boundary_per_edge=1, tol=1e-9)
    assert not [v for v in rep.violations if v["branch"] != "flux"]


@pytest.mark.parametrize("name", ["l2", "ellipse"])
def test_cone_pair_signs_off_segment(name):
    F = NORMS[name]
    diam, a, b = diameter(F, SQUARE)
    u = cone_pair(F, a, b)
    lam = 2.0 / diam
    rep = residual_scan(F, SQUARE, u, lam, n=16, tol=1e-9)
    for v in rep.violations:
        if v["branch"] == "A":
            assert v["value"] > 0
        elif v["branch"] == "B":
            assert v["value"] < 0


@pytest.mark.parametrize("name", ["l2", "ellipse"])
def test_tabulated_cone_converges(name):
    F = NORMS[name]
    cone = Cone(np.array([0.0, 0.0]), 1.0, 2.0)
    x = np.array([[0.7, 0.6], [0.5, 0.8], [0.8, 0.3]])
    errs = []
    for h in (0.1, 0.05, 0.025):
        mesh = triangulate(SQUARE, h)
        tab = Tabulated(ScalarField.from_function(mesh, lambda p: 2.0 - F.polar().evaluate(p)))
        errs.append(max(abs(q_infinity(F, tab, p) - q_infinity(F, cone, p)) for p in x))
    assert errs[-1] < 0.1
    assert errs[2] < errs[0]


def test_tabulated_reproduces_quadratics():
    mesh = triangulate(SQUARE, 0.1)
    fn = lambda p: 1 + 2 * p[:, 0] - p[:, 1] + 0.5 * p[:, 0] ** 2 + 3 * p[:, 0] * p[:, 1]  # noqa: E731
    tab = Tabulated(ScalarField.from_function(mesh, fn))
    x = np.array([0.43, 0.61])
    j = tab.jet(LqNorm(2), x)
    assert j.u == pytest.approx(fn(x[None])[0], rel=1e-10)
    np.testing.assert_allclose(j.grad, [2 + x[0] + 3 * x[1], -1 + 3 * x[0]], rtol=1e-9)
    np.testing.assert_allclose(j.hess, [[1.0, 3.0], [3.0, 0.0]], atol=1e-8)


@pytest.mark.slow
def test_tabulated_p64_screen():
    # sign screen of the computed p = 64 minimiser, away from the nodal line and the boundary
    from finsler_eigen.spectra import neumann_eigenvalue

    F, h = LqNorm(2), 0.02
    res = neumann_eigenvalue(F, SQUARE, 64.0, h=h)
    tab = Tabulated(res.field)
    top = np.abs(res.field.values).max()
    rep = residual_scan(F, SQUARE, tab, res.lam, n=24, tol=0.05)
    far = [v for v in rep.violations if v["branch"] in ("A", "B")
           and abs(tab.jet(F, np.array(v["x"])).u) > 0.1 * top
           and SQUARE.signed_margin(np.array(v["x"])) > 3 * h]
    worst = max([abs(v["value"]) for v in far] + [0.0])
    assert worst < 0.05, f"{len(far)} screen violations, worst {worst:.3g}"
