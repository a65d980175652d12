from __future__ import annotations

import csv
import io
import math

import numpy as np
import pytest

from bifval import flow
from bifval import geometry as geo
from bifval.expr import parse

EPS = np.finfo(float).eps


def pair(f: str, g: str, n: int) -> geo.ProblemPair:
    return geo.ProblemPair(parse(f, n), parse(g, n))


SEC4 = pair("y", "0.5*x^2 + y^2 - 0.5", 3)
EXA2 = pair("y/(1+x^2)", "x", 2)
PZ = pair("x - 3*x^5*y^2 + 2*x^7*y^3 + y*z", "y", 3)


# ------------------------------------------------------------------ integrator


def test_zero_field_gives_constant_trajectory():
    tr = flow.integrate_field(lambda x: np.zeros_like(x), [1.0, 2.0])
    assert tr.completed and tr.times[-1] == 1.0
    assert np.all(tr.points == [1.0, 2.0])


def test_constant_field_is_exact():
    c = np.array([0.3, -1.25, 2.0])
    tr = flow.integrate_field(lambda x: c, np.zeros(3))
    assert np.max(np.abs(tr.endpoint - c)) <= 1e-12


def test_exponential_oracle():
    tr = flow.integrate_field(lambda x: x, [1.0])
    assert abs(tr.endpoint[0] - math.e) <= 1e-8
    assert np.all(np.diff(tr.times) > 0) and tr.times[0] == 0.0


def test_backward_time_span():
    tr = flow.integrate_field(lambda x: x, [math.e], t_span=(1.0, 0.0))
    assert abs(tr.endpoint[0] - 1.0) <= 1e-8


def test_blow_up_is_reported():
    # x' = x^2 from x = 1 blows up at t = 1
    tr = flow.integrate_field(lambda x: x * x, [1.0], t_span=(0.0, 2.0))
    assert tr.termination in ("escaped_window", "step_underflow")
    assert tr.times[-1] < 1.0


def test_max_steps_and_field_stop():
    tr = flow.integrate_field(lambda x: np.cos(50 * x), [0.0], controls=flow.StepControls(max_steps=5))
    assert tr.termination == "max_steps"

    def rhs(x):
        if x[0] > 0.5:
            raise flow.FieldStop("degenerate_field", "test stop")
        return np.ones(1)

    tr = flow.integrate_field(rhs, [0.0])
    assert tr.termination == "degenerate_field"
    assert 0.45 < tr.endpoint[0] <= 0.5 + 1e-9


def test_stiff_detection_and_radau():
    def rhs(x):
        return np.array([-1e6 * (x[0] - math.cos(x[1])), 1.0])

    tr = flow.integrate_field(rhs, [1.0, 0.0], stop_if_stiff=True)
    assert tr.termination == "stiff"
    tr = flow.integrate_stiff(rhs, [1.0, 0.0])
    assert tr.completed and abs(tr.endpoint[0] - math.cos(1.0)) <= 1e-5


def test_trajectory_exports():
    res = flow.transport_ambient(EXA2, [2.0, 1.5], 0.5)
    text = res.trajectory.to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["t", "x_1", "x_2", "f", "g", "norm"]
    assert len(rows) == len(res.trajectory.times) + 1
    d = res.to_dict()
    assert d["trajectory"]["termination"] == "completed"
    assert "points" not in d["trajectory"]


# ------------------------------------------------------------------ transports


def test_linear_transport_is_straight():
    p = pair("x1", "x2", 2)
    res = flow.transport_ambient(p, [0.2, 3.0], -1.7)
    assert res.success
    assert np.allclose(res.endpoint, [-1.7, 3.0], atol=1e-12)


def test_exa2_vertical_transport():
    res = flow.transport_ambient(EXA2, [2.0, 1.5], 0.5)
    assert res.success and res.f_error <= 1e-8
    assert np.allclose(res.endpoint, [2.0, 2.5], atol=1e-8)


def test_same_fiber_is_zero_length():
    x = np.array([3.0, 0.7])
    res = flow.transport_ambient(EXA2, x, EXA2.f.evaluate(x))
    assert res.success and np.array_equal(res.endpoint, x)
    y = np.array([1.0, 0.0, 2.0])
    res = flow.transport_on_manifold(SEC4, y, 0.0)
    assert res.success and np.array_equal(res.endpoint, y)
    assert flow.round_trip(EXA2, x, EXA2.f.evaluate(x)) == 0.0


def test_degenerate_ambient_start():
    # grad f vanishes at the origin for f = x^2 + y^2
    p = pair("x^2 + y^2", "x", 2)
    res = flow.transport_ambient(p, [0.0, 0.0], 1.0)
    assert not res.success and res.trajectory.termination == "degenerate_field"


def test_manifold_transport_matches_closed_form():
    rng = np.random.default_rng(11)
    for _ in range(5):
        x0 = rng.choice([-1.0, 1.0]) * math.sqrt(1 - 2 * 0.1**2)
        z0 = rng.uniform(2.0, 20.0) * rng.choice([-1.0, 1.0])
        start = np.array([x0, 0.1, z0])
        lam = float(rng.uniform(-0.5, 0.5))
        res = flow.transport_on_manifold(SEC4, start, lam)
        assert res.success
        N = np.linalg.norm(start)
        xe = math.copysign(math.sqrt(1 - 2 * lam * lam), x0)
        ze = math.copysign(math.sqrt(N * N - xe * xe - lam * lam), z0)
        assert np.allclose(res.endpoint, [xe, lam, ze], atol=1e-9)
        assert res.norm_drift <= 1e-7 and res.max_g_abs <= 1e-10


def test_manifold_start_on_milnor_set():
    res = flow.transport_on_manifold(SEC4, [0.0, math.sqrt(0.5), 3.0], 0.2)
    assert not res.success
    assert res.trajectory.termination == "entered_milnor_set"
    with pytest.raises(flow.TransportError) as info:
        flow.round_trip(SEC4, [0.0, math.sqrt(0.5), 3.0], 0.2, mode="manifold")
    assert info.value.leg == "forward"


def test_manifold_start_next_to_v_set():
    res = flow.transport_on_manifold(SEC4, [1.0, 0.0, 2.0], 0.5)
    assert res.success and abs(res.endpoint[1] - 0.5) <= 1e-8


def test_off_manifold_start_rejected():
    with pytest.raises(geo.OffManifoldError):
        flow.transport_on_manifold(SEC4, [1.0, 0.1, 2.0], 0.3)
    near = np.array([1.0, 1e-4, 2.0])
    projected = flow.project_to_manifold(SEC4.g, near)
    assert abs(SEC4.g.evaluate(projected)) <= 1e-12
    with pytest.raises(geo.OffManifoldError):
        flow.project_to_manifold(SEC4.g, [2.0, 2.0, 2.0])


def test_pz_stiff_start_uses_fallback():
    starts = flow.sample_fiber_points(PZ.f, 100, 5.0, 50.0, (-1.0, 1.0), seed=42)
    res = flow.transport_ambient(PZ, starts[15], -1.0)
    assert res.success and res.f_error <= 1e-8
    assert res.extra["integrator"] == "radau"


def test_round_trips():
    rng = np.random.default_rng(5)
    for x in flow.sample_fiber_points(EXA2.f, 10, 5.0, 50.0, seed=5):
        err = flow.round_trip(EXA2, x, float(rng.uniform(-1, 1)))
        assert err <= 1e-5 * (1 + np.linalg.norm(x))
    pts = flow.sample_manifold_points(SEC4.g, 40, 5.0, 50.0, seed=5)
    for x in pts[np.abs(pts[:, 1]) < 0.6][:10]:
        err = flow.round_trip(SEC4, x, float(rng.uniform(-0.6, 0.6)), mode="manifold")
        assert err <= 1e-5 * (1 + np.linalg.norm(x))
    with pytest.raises(ValueError):
        flow.round_trip(EXA2, [1.0, 1.0], 0.0, mode="sideways")


@pytest.mark.parametrize("which", ["exa2", "exa3", "sec4"])
def test_halving_rtol_does_not_increase_f_error(which):
    # f_error values at the level of a few ulps of f are round-off noise
    if which == "sec4":
        pts = flow.sample_manifold_points(SEC4.g, 30, 5.0, 50.0, seed=1)
        starts, p, mode = pts[np.abs(pts[:, 1]) < 0.6][:6], SEC4, "manifold"
    else:
        p = EXA2 if which == "exa2" else PZ
        starts, mode = flow.sample_fiber_points(p.f, 6, 5.0, 50.0, seed=1), "ambient"
    for x in starts:
        base = flow._controls_for(1e-8, None)
        half = flow.StepControls(rtol=base.rtol / 2, atol=base.atol)
        lam = 0.3
        if mode == "ambient":
            a = flow.transport_ambient(p, x, lam, 1.0, 1e-8, base)
            b = flow.transport_ambient(p, x, lam, 1.0, 1e-8, half)
        else:
            a = flow.transport_on_manifold(p, x, lam, 1e-8, base)
            b = flow.transport_on_manifold(p, x, lam, 1e-8, half)
        floor = 4 * EPS * max(1.0, abs(lam), abs(p.f.evaluate(x)))
        assert b.f_error <= max(a.f_error, floor)


def test_samplers():
    pts = flow.sample_fiber_points(PZ.f, 20, 5.0, 50.0, (-1.0, 1.0), seed=0)
    vals = np.array([PZ.f.evaluate(x) for x in pts])
    norms = np.linalg.norm(pts, axis=1)
    assert np.all(np.abs(vals) <= 1.0 + 1e-12) and np.all((norms >= 5) & (norms <= 50))
    again = flow.sample_fiber_points(PZ.f, 20, 5.0, 50.0, (-1.0, 1.0), seed=0)
    assert np.array_equal(pts, again)
    with pytest.raises(RuntimeError):
        flow.sample_manifold_points(parse("x^2 + y^2 - 1", 2), 3, 5.0, 50.0, max_rounds=2)
