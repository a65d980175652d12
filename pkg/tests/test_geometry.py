from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bifval import geometry as geo
from bifval.expr import parse
from bifval.flow import sample_manifold_points


def pair(f: str, g: str, n: int) -> geo.ProblemPair:
    return geo.ProblemPair(parse(f, n), parse(g, n))


SEC4 = pair("y", "0.5*x^2 + y^2 - 0.5", 3)
EXA2 = pair("y/(1+x^2)", "x", 2)
PZ = pair("x - 3*x^5*y^2 + 2*x^7*y^3 + y*z", "y", 3)


def test_problem_pair_validation():
    with pytest.raises(ValueError):
        geo.ProblemPair(parse("x", 2), parse("x", 3))
    with pytest.raises(ValueError):
        geo.ProblemPair(parse("x", 1), parse("x", 1))


def test_tangential_gradient_examples():
    assert geo.tangential_gradient(EXA2, [3.0, 7.0]).tolist() == [0.0, 0.1]
    ex1 = pair("x - x^3*y^2", "y", 2)
    assert geo.tangential_gradient(ex1, [5.0, 0.0]).tolist() == [1.0, 0.0]
    # s = 0 slice of the polynomial example: the tangential gradient is e_x
    assert np.allclose(geo.tangential_gradient(PZ, [3.0, 0.0, -8.0]), [1.0, 0.0, 0.0], atol=0)
    with pytest.raises(geo.DegenerateGradientError):
        geo.tangential_gradient(pair("x", "y^2", 2), [1.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3))
def test_tangential_gradient_properties(x):
    x = np.array(x)
    gf = PZ.f.gradient(x)
    gg = PZ.g.gradient(x)
    t = geo.tangential_gradient(PZ, x)
    scale = np.linalg.norm(gf) * np.linalg.norm(gg)
    assert abs(t @ gg) <= 1e-10 * scale
    assert abs(t @ gf - t @ t) <= 1e-10 * max(1.0, t @ t, np.linalg.norm(gf) ** 2)


def test_bump_pair_plateaus_and_smoothness():
    R = 2.0
    assert geo.bump_pair([0.0, 1.9], R) == (1.0, 0.0)
    assert geo.bump_pair([0.0, 2.0], R) == (1.0, 0.0)
    assert geo.bump_pair([3.0, 0.0], R) == (0.0, 1.0)
    a, b = geo.bump_pair([2.5, 0.0], R)
    assert 0.0 < a < 1.0 and a + b == 1.0
    radii = np.linspace(2.0, 3.0, 201)
    betas = [geo.bump_pair([r, 0.0], R)[1] for r in radii]
    assert all(np.diff(betas) >= 0)
    with pytest.raises(ValueError):
        geo.bump_pair([1.0, 0.0], 0.0)


def test_field_u_pairs_to_one():
    rng = np.random.default_rng(3)
    for x in rng.uniform(-6, 6, (200, 2)):
        try:
            u = geo.field_u(EXA2, x, 1.0)
        except geo.GeometryError:
            continue
        assert abs(EXA2.f.gradient(x) @ u - 1.0) <= 1e-10


def test_field_w_outside_ball_is_tangential():
    x = np.array([4.0, 1.0])
    w = geo.field_w(EXA2, x, 1.0)
    assert np.array_equal(w, geo.tangential_gradient(EXA2, x))
    inside = np.array([0.1, 0.2])
    assert np.array_equal(geo.field_w(EXA2, inside, 1.0), EXA2.f.gradient(inside))


def test_field_v_worked_values():
    for z in (-10.0, -1.0, -0.1, 0.1, 1.0, 10.0):
        v = geo.field_v(SEC4, [1.0, 0.0, z])
        assert abs(v[1] - 1.0) <= 1e-10
    assert np.allclose(geo.field_v(SEC4, [1.0, 0.0, 2.0]), [0.0, 1.0, 0.0], atol=1e-15)
    for t in np.linspace(0.1, 6.0, 40):
        if abs(math.cos(t)) < 1e-3 or abs(math.sin(t)) < 1e-3:
            continue
        x = [math.cos(t), math.sin(t) / math.sqrt(2), 0.0]
        assert abs(geo.field_v(SEC4, x)[1]) <= 1e-10


def test_field_v_undefined_on_v_set():
    with pytest.raises(geo.MilnorDegenerateError):
        geo.field_v(SEC4, [1.0, 0.0, 0.0])
    with pytest.raises(geo.MilnorDegenerateError):
        geo.field_v_by_projection(SEC4, [1.0, 0.0, 0.0])
    with pytest.raises(geo.OffManifoldError):
        geo.field_v(SEC4, [2.0, 0.0, 0.0])


def test_field_v_zero_where_gradients_parallel():
    # x = 0 on the surface: grad f = e_y is parallel to grad g = (0, 2y, 0)
    x = [0.0, math.sqrt(0.5), 4.0]
    assert np.allclose(geo.field_v(SEC4, x), 0.0, atol=1e-15)
    assert np.allclose(geo.field_v_by_projection(SEC4, x), 0.0, atol=1e-15)


def test_two_v_formulas_agree_and_are_orthogonal():
    pts = sample_manifold_points(SEC4.g, 500, 1.5, 20.0, seed=7)
    for x in pts:
        v = geo.field_v(SEC4, x)
        w = geo.field_v_by_projection(SEC4, x)
        assert np.max(np.abs(v - w)) <= 1e-9 * np.max(np.abs(v))
        nv = np.linalg.norm(v)
        gg = SEC4.g.gradient(x)
        assert abs(v @ x) <= 1e-10 * nv * np.linalg.norm(x)
        assert abs(v @ gg) <= 1e-10 * nv * np.linalg.norm(gg)
        r = geo.milnor_residual(SEC4, x)
        if r.value > 1e-6:
            assert abs(v @ geo.tangential_gradient(SEC4, x)) > 0


def test_milnor_residual_values():
    r = geo.milnor_residual(SEC4, [1.0, 0.0, 0.0])
    assert r == (0.0, True)
    r = geo.milnor_residual(SEC4, [0.0, math.sqrt(0.5), 3.0])
    assert r.value <= 1e-30 and not r.in_v_set
    r = geo.milnor_residual(SEC4, [math.cos(1.0), math.sin(1.0) / math.sqrt(2), 2.0])
    assert 0.0 < r.value <= 1.0 and not r.in_v_set
    with pytest.raises(geo.OffManifoldError):
        geo.milnor_residual(SEC4, [3.0, 3.0, 3.0])


def test_milnor_residual_is_scale_free():
    x = np.array([math.cos(0.7), math.sin(0.7) / math.sqrt(2), 1.3])
    base = geo.milnor_residual(SEC4, x).value
    scaled = geo.ProblemPair(parse("1e6*y", 3), parse("1e-4*(0.5*x^2 + y^2 - 0.5)", 3))
    assert geo.milnor_residual(scaled, x).value == pytest.approx(base, rel=1e-12)


def test_circle_is_entirely_v_set():
    circle = pair("x", "x^2 + y^2 - 1", 2)
    for t in np.linspace(0.0, 2 * math.pi, 37):
        r = geo.milnor_residual(circle, [math.cos(t), math.sin(t)], tol=1e-12)
        assert r.value == 0.0 and r.in_v_set


def test_jacobian_pair_identity_for_shear():
    shear = pair("x + y^2", "y", 2)
    rng = np.random.default_rng(0)
    for x in rng.uniform(-3, 3, (100, 2)):
        t = geo.tangential_gradient(shear, x)
        g2 = shear.g.gradient(x)
        assert (t @ t) * (g2 @ g2) == pytest.approx(1.0, rel=1e-12)


def test_sample_field_marks_degeneracy():
    s = geo.sample_field(SEC4, [0.5, 0.3, 2.0], R=1.0)
    assert s.malgrange == pytest.approx(np.linalg.norm([0.5, 0.3, 2.0]))
    assert s.degenerate is None and "bump" in s.extra
    d = s.to_dict()
    assert set(d) >= {"x", "tangential", "fiber_malgrange", "milnor_residual", "in_v_set"}
    bad = geo.sample_field(pair("log(x)", "y", 2), [-1.0, 0.0])
    assert bad.degenerate and math.isnan(bad.f_value)
    flat = geo.sample_field(pair("x", "y^2", 2), [1.0, 0.0])
    assert flat.degenerate and flat.tangential is None


def test_ex1_published_points():
    ex1 = pair("x - x^3*y^2", "y", 2)
    for k in range(1, 11):
        x = [k / 2.0, 2.0 / (math.sqrt(3.0) * k)]
        assert np.linalg.norm(geo.tangential_gradient(ex1, x)) <= 1e-12
