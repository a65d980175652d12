"""Built-in worked examples with pinned settings and expected outcomes.

Each example returns a list of :class:`Check` rows (expected vs observed,
pass/fail) together with a small dictionary of supporting numbers. The
``examples`` command of the CLI renders these rows as a pass/fail matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import flow
from . import geometry as geo
from .expr import Expression, jacobian2, parse
from .scan import SweepConfig, check_gS, scan_k_infinity, scan_s_zero

__all__ = ["Check", "ExampleResult", "EXAMPLES", "PROBLEMS", "run_example", "jacobian_pairs"]

# formula text, arity and the auxiliary function g of each worked example
PROBLEMS: dict[str, dict] = {
    "ex1": {"n": 2, "f": "x - x^3*y^2", "g": "y"},
    "exa2": {"n": 2, "f": "y/(1+x^2)", "g": "x"},
    "exa3": {"n": 3, "f": "x - 3*x^5*y^2 + 2*x^7*y^3 + y*z", "g": "y"},
    "sec4": {"n": 3, "f": "y", "g": "0.5*x^2 + y^2 - 0.5"},
}

TOL = 1e-8
ROUND_TRIPS = 50


@dataclass
class Check:
    example: str
    name: str
    expected: str
    observed: object
    passed: bool

    def to_dict(self) -> dict:
        return {
            "example": self.example,
            "check": self.name,
            "expected": self.expected,
            "observed": _plain(self.observed),
            "pass": bool(self.passed),
        }


@dataclass
class ExampleResult:
    name: str
    checks: list[Check]
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "example": self.name,
            "pass": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "details": _plain(self.details),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def pair(name: str) -> geo.ProblemPair:
    entry = PROBLEMS[name]
    return geo.ProblemPair(parse(entry["f"], entry["n"]), parse(entry["g"], entry["n"]))


class _Rows:
    def __init__(self, example: str):
        self.example = example
        self.rows: list[Check] = []

    def add(self, name: str, expected: str, observed, passed) -> None:
        self.rows.append(Check(self.example, name, expected, observed, bool(passed)))


# ------------------------------------------------------------------- flows


def _flow_checks(rows: _Rows, p: geo.ProblemPair, starts: np.ndarray, lams: np.ndarray, mode: str, label: str):
    """Transport every start, check the flow invariants on each successful
    trajectory, and return the results."""
    results = []
    for x, lam in zip(starts, lams):
        if mode == "ambient":
            results.append(flow.transport_ambient(p, x, float(lam), 1.0, TOL))
        else:
            results.append(flow.transport_on_manifold(p, x, float(lam), TOL))
    ok = [r for r in results if r.success]
    rows.add(f"{label}: success rate", "1.0", len(ok) / len(results), len(ok) == len(results))
    max_f = max((r.f_error for r in results), default=0.0)
    rows.add(f"{label}: max f_error", f"<= {TOL:g}", max_f, max_f <= TOL)
    affine = max((r.max_affine_residual for r in ok), default=0.0)
    rows.add(f"{label}: affine law residual", f"<= {10 * TOL:g} at every accepted step", affine, affine <= 10 * TOL)
    if mode == "manifold":
        drift = max((r.norm_drift for r in ok), default=0.0)
        rows.add(f"{label}: norm drift", f"<= {10 * TOL:g}", drift, drift <= 10 * TOL)
        gmax = max((r.max_g_abs for r in ok), default=0.0)
        rows.add(f"{label}: max |g| along paths", "<= 1e-10", gmax, gmax <= 1e-10)
    return results


def _round_trips(rows: _Rows, p, starts, lams, mode: str, label: str) -> float:
    worst = 0.0
    failures = 0
    for x, lam in zip(starts, lams):
        try:
            err = flow.round_trip(p, x, float(lam), mode=mode, R=1.0, tol=TOL)
        except flow.TransportError:
            failures += 1
            continue
        worst = max(worst, err / (1.0 + float(np.linalg.norm(x))))
    rows.add(f"{label}: round trips failing", "0", failures, failures == 0)
    rows.add(f"{label}: max round-trip error / (1+||x||)", "<= 1e-5", worst, worst <= 1e-5)
    return worst


# ----------------------------------------------------------------- examples


def run_ex1(seed: int) -> ExampleResult:
    rows = _Rows("ex1")
    p = pair("ex1")
    norms = []
    for k in range(1, 11):
        x = np.array([k / 2.0, 2.0 / (math.sqrt(3.0) * k)])
        norms.append(float(np.linalg.norm(geo.tangential_gradient(p, x))))
    rows.add("||grad_g f|| at (n/2, 2/(sqrt(3) n)), n=1..10", "<= 1e-12", max(norms), max(norms) <= 1e-12)
    xs = np.random.default_rng(seed).uniform(-100.0, 100.0, 50)
    exact = all(np.array_equal(geo.tangential_gradient(p, np.array([x, 0.0])), [1.0, 0.0]) for x in xs)
    rows.add("grad f_M on y = 0", "(1, 0) exactly", "(1, 0)" if exact else "differs", exact)
    return ExampleResult("ex1", rows.rows, {"tangential_norms": norms})


def run_exa2(seed: int) -> ExampleResult:
    rows = _Rows("exa2")
    p = pair("exa2")
    verdict = check_gS(p.f, p.g, cfg=SweepConfig(seed=seed))
    for label, ok in zip(("item 1", "item 2", "item 3"), verdict.items):
        rows.add(f"(g,S) condition {label}", "pass", "pass" if ok else "fail", ok)
    dev = max(
        (abs(s["tangential_norm"] - 1.0 / (1.0 + sl.s**2)) for sl in verdict.slices for s in sl.samples),
        default=math.inf,
    )
    rows.add("slice ||grad_g f|| vs 1/(1+s^2)", "<= 1e-12", dev, dev <= 1e-12)

    kinf = scan_k_infinity(p.f, SweepConfig(seed=seed))
    zero = [c for c in kinf.candidates if abs(c.value) <= 1e-3]
    conf = zero[0].confidence if zero else 0.0
    rows.add("K_inf candidate 0", "present", [c.value for c in kinf.candidates], bool(zero))
    rows.add("K_inf candidate 0 confidence", ">= 0.9", conf, conf >= 0.9)

    res = flow.transport_ambient(p, np.array([2.0, 1.5]), 0.5, 1.0, TOL)
    err = float(np.max(np.abs(res.endpoint - [2.0, 2.5])))
    rows.add("transport (2, 1.5) to f = 0.5", "endpoint (2, 2.5) within 1e-8", res.endpoint, res.success and err <= 1e-8)

    rng = np.random.default_rng([seed, 2])
    starts = flow.sample_fiber_points(p.f, ROUND_TRIPS, 5.0, 50.0, (-1.0, 1.0), seed=seed)
    lams = rng.uniform(-1.0, 1.0, ROUND_TRIPS)
    _flow_checks(rows, p, starts, lams, "ambient", "ambient transports")
    worst = _round_trips(rows, p, starts, lams, "ambient", "ambient")
    details = {
        "gS_evidence": verdict.evidence,
        "K_inf_candidates": [(c.value, c.confidence) for c in kinf.candidates],
        "max_round_trip": worst,
    }
    return ExampleResult("exa2", rows.rows, details)


def run_exa3(seed: int) -> ExampleResult:
    rows = _Rows("exa3")
    p = pair("exa3")
    verdict = check_gS(p.f, p.g, cfg=SweepConfig(seed=seed, directions=1024, slice_directions=64))
    for label, ok in zip(("item 1", "item 2", "item 3"), verdict.items):
        rows.add(f"(g,S) condition {label}", "pass", "pass" if ok else "fail", ok)
    worst_zero = 0.0
    worst_other = math.inf
    for sl in verdict.slices:
        for s in sl.samples:
            t = s["tangential_norm"]
            if sl.s == 0.0:
                worst_zero = max(worst_zero, abs(t - 1.0))
            else:
                worst_other = min(worst_other, t - abs(sl.s))
    rows.add("slice s = 0: | ||grad_g f|| - 1 |", "<= 1e-12", worst_zero, worst_zero <= 1e-12)
    rows.add("slices s != 0: min(||grad_g f|| - |s|)", ">= -1e-12", worst_other, worst_other >= -1e-12)

    starts = flow.sample_fiber_points(p.f, 100, 5.0, 50.0, (-1.0, 1.0), seed=seed)
    lams = np.array([(-1.0, 0.0, 1.0)[i % 3] for i in range(len(starts))])
    _flow_checks(rows, p, starts, lams, "ambient", "100 transports to {-1, 0, 1}")
    rng = np.random.default_rng([seed, 3])
    lams = rng.uniform(-1.0, 1.0, ROUND_TRIPS)
    worst = _round_trips(rows, p, starts[:ROUND_TRIPS], lams, "ambient", "ambient")
    return ExampleResult("exa3", rows.rows, {"gS_evidence": verdict.evidence, "max_round_trip": worst})


def jacobian_pairs(seed: int, count: int = 10) -> list[tuple[str, str]]:
    """The shear (x + y^2, y) followed by ``count - 1`` random maps of
    Jacobian 1, each a composition of two polynomial shears."""
    rng = np.random.default_rng([seed, 4])
    out = [("x + y^2", "y")]
    while len(out) < count:
        a1, a2, b1, b2 = (float(c) for c in np.round(rng.uniform(-0.5, 0.5, 4), 3))
        X = f"x + {a1!r}*y + {a2!r}*y^2"
        Y = f"y + {b1!r}*({X}) + {b2!r}*({X})^2"
        if len(out) % 2:
            X, Y = Y, f"-({X})"  # swapping with a sign keeps the Jacobian at 1
        out.append((X, Y))
    return out


def run_exa4(seed: int) -> ExampleResult:
    rows = _Rows("exa4")
    rng = np.random.default_rng([seed, 5])
    worst_all = 0.0
    per_pair = []
    for t1, t2 in jacobian_pairs(seed):
        f1, f2 = parse(t1, 2), parse(t2, 2)
        p = geo.ProblemPair(f1, f2)
        worst = 0.0
        jac_dev = 0.0
        for x in rng.uniform(-2.0, 2.0, (1000, 2)):
            tan = geo.tangential_gradient(p, x)
            g2 = f2.gradient(x)
            lhs = float(tan @ tan) * float(g2 @ g2)
            j = jacobian2(f1, f2, x)
            worst = max(worst, abs(lhs - j * j) / max(abs(lhs), j * j))
            jac_dev = max(jac_dev, abs(j - 1.0))
        per_pair.append({"f1": t1, "f2": t2, "max_rel_error": worst, "max_jacobian_deviation": jac_dev})
        worst_all = max(worst_all, worst)
        rows.add(f"identity for ({t1}, {t2})", "relative error <= 1e-9", worst, worst <= 1e-9)
    return ExampleResult("exa4", rows.rows, {"pairs": per_pair, "max_rel_error": worst_all})


def run_sec4(seed: int) -> ExampleResult:
    rows = _Rows("sec4")
    p = pair("sec4")
    rng = np.random.default_rng([seed, 6])

    dev = max(abs(geo.field_v(p, [1.0, 0.0, z])[1] - 1.0) for z in (-10, -1, -0.1, 0.1, 1, 10))
    rows.add("(a) v^2(1, 0, z) for z in {+-0.1, +-1, +-10}", "1 +- 1e-10", dev, dev <= 1e-10)

    t = rng.uniform(0.0, 2 * math.pi, 100)
    t = t[(np.abs(np.cos(t)) > 1e-3) & (np.abs(np.sin(t)) > 1e-3)]
    ring = np.stack([np.cos(t), np.sin(t) / math.sqrt(2.0), np.zeros_like(t)], axis=1)
    v2 = max(abs(geo.field_v(p, x)[1]) for x in ring)
    rows.add("(b) v^2(x, y, 0) on the surface", "0 +- 1e-10", v2, v2 <= 1e-10)

    pts = flow.sample_manifold_points(p.g, 500, 1.5, 20.0, seed=seed)
    agree = 0.0
    orth = 0.0
    for x in pts:
        v = geo.field_v(p, x)
        w = geo.field_v_by_projection(p, x)
        agree = max(agree, float(np.max(np.abs(v - w))) / max(float(np.max(np.abs(v))), 1e-300))
        gg = p.g.gradient(x)
        nv = float(np.linalg.norm(v))
        orth = max(orth, abs(float(v @ x)) / (nv * np.linalg.norm(x)), abs(float(v @ gg)) / (nv * np.linalg.norm(gg)))
    rows.add("(c) closed-form v vs projection v", "relative <= 1e-9", agree, agree <= 1e-9)
    rows.add("(d) <v, x> and <v, grad g>", "relative <= 1e-10", orth, orth <= 1e-10)

    s0 = scan_s_zero(p.f, p.g, SweepConfig(seed=seed, directions=512))
    want = [-1 / math.sqrt(2.0), 1 / math.sqrt(2.0)]
    got = [c.value for c in s0.candidates]
    close = len(got) == 2 and all(abs(a - b) <= 1e-6 for a, b in zip(got, want))
    rows.add("S_0 candidates", "{-1/sqrt(2), 1/sqrt(2)}", got, close)
    worst_res = 0.0
    for c in s0.candidates:
        for w in c.witnesses:
            for x in w.points:
                worst_res = max(worst_res, geo.milnor_residual(p, x).value)
    rows.add("S_0 witnesses re-evaluated", "milnor residual < 1e-8", worst_res, worst_res < 1e-8)

    pool = flow.sample_manifold_points(p.g, 4 * ROUND_TRIPS, 5.0, 50.0, seed=seed + 1)
    starts = pool[np.abs(pool[:, 1]) <= 0.65][:ROUND_TRIPS]
    lams = rng.uniform(-0.6, 0.6, len(starts))
    _flow_checks(rows, p, starts, lams, "manifold", "manifold transports")
    worst = _round_trips(rows, p, starts, lams, "manifold", "manifold")

    milnor = flow.transport_on_manifold(p, [0.0, math.sqrt(0.5), 3.0], 0.2, TOL)
    rows.add(
        "start on the Milnor set (0, sqrt(1/2), 3)",
        "termination entered_milnor_set",
        milnor.trajectory.termination,
        milnor.trajectory.termination == "entered_milnor_set",
    )
    near_v = flow.transport_on_manifold(p, [1.0, 0.0, 2.0], 0.5, TOL)
    rows.add("start near V at (1, 0, 2)", "success", near_v.trajectory.termination, near_v.success)
    return ExampleResult(
        "sec4",
        rows.rows,
        {"S0_candidates": [(c.value, c.confidence) for c in s0.candidates], "max_round_trip": worst},
    )


EXAMPLES: dict[str, Callable[[int], ExampleResult]] = {
    "ex1": run_ex1,
    "exa2": run_exa2,
    "exa3": run_exa3,
    "exa4": run_exa4,
    "sec4": run_sec4,
}


def run_example(name: str, seed: int = 0) -> ExampleResult:
    try:
        runner = EXAMPLES[name]
    except KeyError:
        raise ValueError(f"unknown example {name!r}; choose from {sorted(EXAMPLES)}") from None
    return runner(seed)
