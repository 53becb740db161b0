import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog, minimize_scalar

from conftest import canonical_norms, hex_norm
from finsler_eigen.anisotropy import EllipseNorm, LqNorm, wulff_measure
from finsler_eigen.convexgeom import (ConvexPolygon, boundary_distance, builtin_domain, diameter, drop_collinear,
                                      inradius, isodiametric_ratio, metric_report, random_convex_ngon,
                                      random_convex_polygon, spindle, wulff_polygon, wulff_rescaled)
from finsler_eigen.errors import ConfigError, DomainError

SQUARE = ConvexPolygon([[0, 0], [1, 0], [1, 1], [0, 1]])
ELL = EllipseNorm([[4.0, 0.0], [0.0, 1.0]])


def lp_inradius(F, omega):
    # max r subject to n_i . x + r F(n_i) <= c_i
    n, c = omega.normals, omega.offsets
    A = np.column_stack([n, F.evaluate(n)])
    res = linprog([0, 0, -1], A_ub=A, b_ub=c, bounds=[(None, None)] * 3, method="highs")
    assert res.status == 0
    return -res.fun


def brute_distance(F, omega, x):
    # dense sampling of each edge followed by bounded scalar minimisation
    Fo = F.polar()
    best = np.inf
    for a, b in zip(omega.vertices, np.roll(omega.vertices, -1, axis=0)):
        res = minimize_scalar(lambda t: Fo.evaluate(x - (a + t * (b - a))), bounds=(0, 1), method="bounded",
                              options={"xatol": 1e-12})
        t = np.linspace(0, 1, 201)
        coarse = Fo.evaluate(x - (a + t[:, None] * (b - a))).min()
        best = min(best, res.fun, coarse)
    return best


def test_square_examples():
    assert SQUARE.area == pytest.approx(1.0)
    np.testing.assert_allclose(SQUARE.centroid, [0.5, 0.5])
    for method in ("segment", "halfplane"):
        assert boundary_distance(ELL, SQUARE, [0.5, 0.5], method=method) == pytest.approx(0.25, rel=1e-12)
        assert boundary_distance(LqNorm(2), SQUARE, [0.5, 0.5], method=method) == pytest.approx(0.5, rel=1e-12)
        assert boundary_distance(LqNorm(2), SQUARE, [1.0, 0.3], method=method) == 0.0
    assert diameter(LqNorm(2), SQUARE)[0] == pytest.approx(math.sqrt(2))
    # F = l1 has polar l_inf
    assert diameter(LqNorm(1), SQUARE)[0] == pytest.approx(1.0)
    rho, center = inradius(LqNorm(2), SQUARE)
    assert rho == pytest.approx(0.5, abs=1e-9)
    np.testing.assert_allclose(center, [0.5, 0.5], atol=1e-6)
    assert inradius(ELL, SQUARE)[0] == pytest.approx(0.25, abs=1e-9)
    assert isodiametric_ratio(LqNorm(2), SQUARE) == pytest.approx(2 / math.pi, rel=1e-9)


def test_outside_point_rejected():
    with pytest.raises(DomainError):
        boundary_distance(LqNorm(2), SQUARE, [1.5, 0.5])


@pytest.mark.parametrize("bad,where", [
    ([[0, 0], [0, 1], [1, 1], [1, 0]], 1),          # clockwise
    ([[0, 0], [2, 0], [1, 0.2], [2, 2], [0, 2]], 2),  # reflex vertex
    ([[0, 0], [1, 0], [2, 0], [1, 1]], 1),           # collinear
])
def test_polygon_validation(bad, where):
    with pytest.raises(ConfigError, match=f"vertex {where}"):
        ConvexPolygon(bad)


def test_polygon_needs_three_vertices():
    with pytest.raises(ConfigError):
        ConvexPolygon([[0, 0], [1, 0]])


def test_drop_collinear_and_hull():
    v = drop_collinear([[0, 0], [0.5, 0], [1, 0], [1, 1], [0, 1]])
    assert len(v) == 4
    pts = np.random.default_rng(3).uniform(size=(200, 2))
    poly = ConvexPolygon.hull(pts)
    assert np.all(poly.contains(pts, tol=1e-12))


def test_json_round_trip():
    obj = json.loads(json.dumps(SQUARE.to_json()))
    np.testing.assert_array_equal(ConvexPolygon.from_json(obj).vertices, SQUARE.vertices)


@pytest.mark.parametrize("name", sorted(canonical_norms()))
def test_distance_dual_route(name, rng):
    F = canonical_norms()[name]
    omega = random_convex_polygon(rng, 10)
    w = rng.dirichlet(np.ones(len(omega)), size=300)
    x = w @ omega.vertices
    seg = boundary_distance(F, omega, x, method="segment")
    half = boundary_distance(F, omega, x, method="halfplane")
    np.testing.assert_allclose(seg, half, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("name", ["l2", "l4", "ellipse"])
def test_distance_against_brute_force(name, rng):
    F = canonical_norms()[name]
    omega = random_convex_ngon(rng, 6)
    for x in (rng.dirichlet(np.ones(6), size=5) @ omega.vertices):
        assert boundary_distance(F, omega, x) == pytest.approx(brute_distance(F, omega, x), rel=1e-8)


@pytest.mark.parametrize("name", sorted(canonical_norms()))
def test_inradius_matches_lp(name, rng):
    F = canonical_norms()[name]
    for _ in range(5):
        omega = random_convex_polygon(rng, 9)
        rho, center = inradius(F, omega)
        assert rho == pytest.approx(lp_inradius(F, omega), rel=1e-7)
        assert boundary_distance(F, omega, center, method="halfplane") == pytest.approx(rho, rel=1e-9)


@pytest.mark.parametrize("name", sorted(canonical_norms()))
def test_diameter_against_dense_boundary(name, rng):
    F = canonical_norms()[name]
    omega = random_convex_polygon(rng, 12)
    v = omega.vertices
    t = np.linspace(0, 1, 40, endpoint=False)[:, None, None]
    pts = (v[None] + t * (np.roll(v, -1, axis=0) - v)[None]).reshape(-1, 2)
    dense = F.polar().evaluate(pts[:, None] - pts[None]).max()
    diam, a, b = diameter(F, omega)
    assert diam >= dense * (1 - 1e-12)
    assert diam == pytest.approx(F.polar().evaluate(a - b))


@pytest.mark.parametrize("name", sorted(canonical_norms()))
def test_metric_report_consistency(name, rng):
    F = canonical_norms()[name]
    omega = random_convex_polygon(rng, 8)
    rep = metric_report(F, omega)
    assert rep.diameter >= 2 * rep.inradius
    assert rep.isodiametric_ratio <= 1.0
    assert rep.csv_row().count(",") == len(rep.CSV_FIELDS) - 1


@pytest.mark.parametrize("name", sorted(canonical_norms()))
def test_wulff_polygon_is_near_optimal(name):
    F = canonical_norms()[name]
    w = wulff_polygon(F, 1.0, 256)
    assert isodiametric_ratio(F, w) == pytest.approx(1.0, abs=1e-3)
    assert inradius(F, w)[0] == pytest.approx(1.0, abs=1e-3)
    assert w.area == pytest.approx(wulff_measure(F), rel=1e-3)


def test_wulff_rescaled_has_same_area(rng):
    omega = random_convex_polygon(rng, 10)
    for F in (LqNorm(2), ELL):
        assert wulff_rescaled(F, omega, 512).area == pytest.approx(omega.area, rel=1e-4)
    with pytest.raises(ValueError):
        wulff_rescaled(ELL, omega, 8)


def test_spindle_geometry():
    F = ELL
    omega = spindle(F, 4, 1.0)
    assert diameter(F, omega)[0] == pytest.approx(1.0)
    # γ = F°(e1) = 1/2 so the apexes sit at ±1
    np.testing.assert_allclose(omega.vertices[0], [-1.0, 0.0])
    assert builtin_domain("spindle(4,1)", F).area == pytest.approx(omega.area)


def test_builtin_domains():
    assert builtin_domain("square").area == pytest.approx(1.0)
    disk = builtin_domain("disk256")
    assert disk.area == pytest.approx(128 * math.sin(2 * math.pi / 256))
    assert len(builtin_domain("wulff256", hex_norm())) >= 200
    with pytest.raises(ConfigError):
        builtin_domain("triangle")
    with pytest.raises(ConfigError):
        builtin_domain("wulff256")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), q=st.sampled_from([1.5, 2.0, 3.0, 6.0]))
def test_isodiametric_ratio_at_most_one(seed, q):
    omega = random_convex_polygon(np.random.default_rng(seed), 7)
    assert isodiametric_ratio(LqNorm(q), omega) <= 1.0 + 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.floats(0.1, 10.0), ang=st.floats(0, 6.28))
def test_distance_scales_and_rotates(seed, s, ang):
    rng = np.random.default_rng(seed)
    omega = random_convex_polygon(rng, 8)
    x = rng.dirichlet(np.ones(len(omega))) @ omega.vertices
    d = boundary_distance(LqNorm(2), omega, x)
    big = omega.scaled(s)
    assert boundary_distance(LqNorm(2), big, s * x) == pytest.approx(s * d, rel=1e-9, abs=1e-12)
    c, si = math.cos(ang), math.sin(ang)
    a = np.array([[c, -si], [si, c]])
    rot = omega.transformed(a)
    assert boundary_distance(LqNorm(2), rot, a @ x) == pytest.approx(d, rel=1e-9, abs=1e-12)
