"""End-to-end acceptance criteria.

Each test prints one ``PASS``/``FAIL`` line (outside pytest's capture) with
the observed numbers, then asserts at the stated tolerance.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from bifval import cli, corpus, flow
from bifval import geometry as geo
from bifval.expr import jacobian2, parse
from bifval.scan import SweepConfig, check_gS, scan_k_infinity

TOL = 1e-8


@pytest.fixture
def verdict(capsys):
    def emit(criterion: str, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")

    return emit


def pair(name: str) -> geo.ProblemPair:
    return corpus.pair(name)


def test_criterion_1_ex1(verdict):
    t0 = time.perf_counter()
    p = pair("ex1")
    worst = 0.0
    for n in range(1, 11):
        x = np.array([n / 2.0, 2.0 / (math.sqrt(3.0) * n)])
        worst = max(worst, float(np.linalg.norm(geo.tangential_gradient(p, x))))
    exact = all(
        geo.tangential_gradient(p, np.array([x, 0.0])).tolist() == [1.0, 0.0]
        for x in np.linspace(-50.0, 50.0, 101)
    )
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and exact and elapsed < 1.0
    verdict("1", ok, f"max ||grad_g f|| = {worst:.2e}, (1,0) on y=0: {exact}, {elapsed:.3f}s")
    assert worst <= 1e-12 and exact and elapsed < 1.0


def test_criterion_2_exa2(verdict):
    t0 = time.perf_counter()
    p = pair("exa2")
    v = check_gS(p.f, p.g, S=[(-math.inf, math.inf)], U=(-math.inf, math.inf), R=1.0)
    dev = max(abs(s["tangential_norm"] - 1.0 / (1.0 + sl.s**2)) for sl in v.slices for s in sl.samples)
    n_samples = sum(len(sl.samples) for sl in v.slices)
    rep = scan_k_infinity(p.f)
    zero = [c for c in rep.candidates if abs(c.value) <= 1e-6]
    conf = zero[0].confidence if zero else 0.0
    elapsed = time.perf_counter() - t0
    ok = v.items == (True, True, True) and dev <= 1e-12 and conf >= 0.9 and elapsed < 60
    verdict(
        "2",
        ok,
        f"items {v.items}, slice dev {dev:.1e} over {n_samples} samples, "
        f"K_inf {[round(c.value, 12) for c in rep.candidates]} conf {conf:.4f}, {elapsed:.1f}s",
    )
    assert v.items == (True, True, True)
    assert n_samples > 0 and dev <= 1e-12
    assert zero and conf >= 0.9
    assert elapsed < 60


@pytest.mark.slow
def test_criterion_3_exa3(verdict):
    t0 = time.perf_counter()
    p = pair("exa3")
    v = check_gS(p.f, p.g)
    at_zero = [s["tangential_norm"] for sl in v.slices if sl.s == 0.0 for s in sl.samples]
    margin = [s["tangential_norm"] - abs(sl.s) for sl in v.slices if sl.s != 0.0 for s in sl.samples]
    zero_dev = max(abs(t - 1.0) for t in at_zero)
    low = min(margin)

    starts = flow.sample_fiber_points(p.f, 100, 5.0, 50.0, (-1.0, 1.0), seed=0)
    norms = np.linalg.norm(starts, axis=1)
    results = [flow.transport_ambient(p, x, (-1.0, 0.0, 1.0)[k % 3], 1.0, TOL) for k, x in enumerate(starts)]
    n_ok = sum(r.success for r in results)
    max_err = max(r.f_error for r in results)
    elapsed = time.perf_counter() - t0
    ok = v.passed and zero_dev <= 1e-12 and low >= -1e-12 and n_ok == 100 and max_err <= TOL and elapsed < 120
    verdict(
        "3",
        ok,
        f"items {v.items}, |t-1| at s=0 {zero_dev:.1e} ({len(at_zero)} pts), min(t-|s|) {low:.3e}, "
        f"transports {n_ok}/100 max f_error {max_err:.1e}, {elapsed:.1f}s",
    )
    assert v.passed
    assert at_zero and zero_dev <= 1e-12
    assert margin and low >= -1e-12
    assert np.all((norms >= 5.0) & (norms <= 50.0))
    assert n_ok == 100 and max_err <= TOL
    assert elapsed < 120


def test_criterion_4_exa4(verdict):
    rng = np.random.default_rng(2024)
    pairs = corpus.jacobian_pairs(2024)
    assert len(pairs) == 10 and pairs[0] == ("x + y^2", "y")
    worst = 0.0
    for t1, t2 in pairs:
        f1, f2 = parse(t1, 2), parse(t2, 2)
        p = geo.ProblemPair(f1, f2)
        for x in rng.uniform(-2.0, 2.0, (1000, 2)):
            tan = geo.tangential_gradient(p, x)
            g2 = f2.gradient(x)
            lhs = float(tan @ tan) * float(g2 @ g2)
            # independent Jacobian from the raw gradients
            d1 = f1.gradient(x)
            j = d1[0] * g2[1] - d1[1] * g2[0]
            assert j == pytest.approx(jacobian2(f1, f2, x), rel=1e-14, abs=1e-14)
            worst = max(worst, abs(lhs - j * j) / max(lhs, j * j))
    verdict("4", worst <= 1e-9, f"max relative error {worst:.2e} over 10 pairs x 1000 points")
    assert worst <= 1e-9


def test_criterion_5_sec4_fields(verdict):
    p = pair("sec4")
    a = max(abs(geo.field_v(p, [1.0, 0.0, z])[1] - 1.0) for z in (-10.0, -1.0, -0.1, 0.1, 1.0, 10.0))

    rng = np.random.default_rng(55)
    ring = []
    while len(ring) < 100:
        t = rng.uniform(0.0, 2 * math.pi)
        if abs(math.cos(t)) > 1e-3 and abs(math.sin(t)) > 1e-3:
            ring.append([math.cos(t), math.sin(t) / math.sqrt(2.0), 0.0])
    b = max(abs(geo.field_v(p, x)[1]) for x in ring)

    pts = flow.sample_manifold_points(p.g, 500, 1.5, 20.0, seed=55)
    assert np.max(np.abs([p.g.evaluate(x) for x in pts])) <= 1e-12
    c = d = 0.0
    for x in pts:
        v = geo.field_v(p, x)
        w = geo.field_v_by_projection(p, x)
        c = max(c, float(np.max(np.abs(v - w)) / np.max(np.abs(v))))
        nv = np.linalg.norm(v)
        gg = p.g.gradient(x)
        d = max(d, abs(v @ x) / (nv * np.linalg.norm(x)), abs(v @ gg) / (nv * np.linalg.norm(gg)))
    ok = a <= 1e-10 and b <= 1e-10 and c <= 1e-9 and d <= 1e-10
    verdict("5", ok, f"(a) {a:.1e} (b) {b:.1e} (c) {c:.1e} (d) {d:.1e}")
    assert a <= 1e-10
    assert b <= 1e-10
    assert c <= 1e-9
    assert d <= 1e-10


def _invariants(results, mode):
    ok = [r for r in results if r.success]
    affine = max((r.max_affine_residual for r in ok), default=0.0)
    drift = max((r.norm_drift for r in ok), default=0.0) if mode == "manifold" else 0.0
    gmax = max((r.max_g_abs for r in ok), default=0.0) if mode == "manifold" else 0.0
    return len(ok), affine, drift, gmax


def test_criterion_6_flow_invariants(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(66)
    rows = []
    failures = []

    def run(name, starts, lams, mode):
        p = pair(name)
        if mode == "ambient":
            results = [flow.transport_ambient(p, x, float(l), 1.0, TOL) for x, l in zip(starts, lams)]
        else:
            results = [flow.transport_on_manifold(p, x, float(l), TOL) for x, l in zip(starts, lams)]
        n_ok, affine, drift, gmax = _invariants(results, mode)
        trips = []
        for x, l in zip(starts, lams):
            try:
                trips.append(flow.round_trip(p, x, float(l), mode=mode, R=1.0, tol=TOL) / (1 + np.linalg.norm(x)))
            except flow.TransportError as exc:
                failures.append(f"{name}: {exc}")
        worst_trip = max(trips, default=math.inf)
        rows.append((name, len(starts), n_ok, affine, drift, gmax, len(trips), worst_trip))
        return results

    # exa2: the flow keeps x fixed wherever ||x|| stays beyond the bump region
    p2 = pair("exa2")
    s2 = flow.sample_fiber_points(p2.f, 50, 5.0, 50.0, (-1.0, 1.0), seed=66)
    l2 = rng.uniform(-1.0, 1.0, 50)
    res2 = run("exa2", s2, l2, "ambient")
    far = [(x, l, r) for x, l, r in zip(s2, l2, res2) if abs(x[0]) >= 1.5 and r.success]
    oracle = max(abs(r.endpoint[1] - l * (1 + x[0] ** 2)) / (1 + abs(l) * (1 + x[0] ** 2)) for x, l, r in far)
    shift = max(abs(r.endpoint[0] - x[0]) for x, l, r in far)

    s3 = flow.sample_fiber_points(pair("exa3").f, 50, 5.0, 50.0, (-1.0, 1.0), seed=66)
    run("exa3", s3, rng.uniform(-1.0, 1.0, 50), "ambient")

    pool = flow.sample_manifold_points(pair("sec4").g, 200, 5.0, 50.0, seed=66)
    s4 = pool[np.abs(pool[:, 1]) <= 0.65][:50]
    l4 = rng.uniform(-0.6, 0.6, len(s4))
    res4 = run("sec4", s4, l4, "manifold")
    # closed form on the cylinder: y -> lambda, x keeps its sign, ||x|| is preserved
    cf = 0.0
    for x, l, r in zip(s4, l4, res4):
        xe = math.copysign(math.sqrt(1 - 2 * l * l), x[0])
        ze = math.copysign(math.sqrt(x @ x - xe * xe - l * l), x[2])
        cf = max(cf, float(np.max(np.abs(r.endpoint - [xe, l, ze]))) / (1 + np.linalg.norm(x)))
    elapsed = time.perf_counter() - t0

    ok = not failures and elapsed < 300 and len(s4) == 50
    for name, n, n_ok, affine, drift, gmax, n_trips, trip in rows:
        ok = ok and n_ok == n and affine <= 10 * TOL and drift <= 10 * TOL and gmax <= 1e-10
        ok = ok and n_trips == n and trip <= 1e-5
    verdict(
        "6",
        ok,
        "; ".join(
            f"{name} {n_ok}/{n} affine {affine:.1e} drift {drift:.1e} |g| {gmax:.1e} round trip {trip:.1e}"
            for name, n, n_ok, affine, drift, gmax, _, trip in rows
        )
        + f"; exa2 oracle {oracle:.1e} x-shift {shift:.1e}; sec4 closed form {cf:.1e}; {elapsed:.1f}s",
    )
    assert not failures, failures
    assert len(s4) == 50
    for name, n, n_ok, affine, drift, gmax, n_trips, trip in rows:
        assert n_ok == n, name
        assert affine <= 10 * TOL, name
        assert drift <= 10 * TOL and gmax <= 1e-10, name
        assert trip <= 1e-5, name
    assert far and oracle <= 1e-8 and shift <= 1e-12
    assert cf <= 1e-8
    assert elapsed < 300


def _corpus_expressions():
    out = []
    for entry in corpus.PROBLEMS.values():
        out += [(entry["f"], entry["n"]), (entry["g"], entry["n"])]
    for t1, t2 in corpus.jacobian_pairs(42):
        out += [(t1, 2), (t2, 2)]
    return sorted(set(out))


def test_criterion_7_autodiff(verdict):
    rng = np.random.default_rng(77)
    worst = 0.0
    worst_text = ""
    exprs = _corpus_expressions()
    for text, n in exprs:
        f = parse(text, n)
        X = rng.uniform(-3.0, 3.0, (1000, n))
        for x in X:
            g = f.gradient(x)
            fd = np.empty(n)
            for i in range(n):
                h = 1e-6 * max(1.0, abs(x[i]))
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd[i] = (f.evaluate(xp) - f.evaluate(xm)) / (xp[i] - xm[i])
            err = np.linalg.norm(g - fd) / np.linalg.norm(g)
            if err > worst:
                worst, worst_text = err, text
    verdict("7", worst <= 1e-6, f"{len(exprs)} expressions x 1000 points, max relative error {worst:.2e} ({worst_text})")
    assert worst <= 1e-6


@pytest.mark.slow
def test_criterion_8_determinism(verdict, tmp_path):
    codes = [cli.main(["examples", "all", "--seed", "42", "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    same = a == b
    verdict("8", same and codes == [0, 0], f"exit codes {codes}, identical reports: {same} ({len(a)} bytes)")
    assert codes == [0, 0]
    assert same
