"""Move points between fibers by integrating the trivialization fields.

Ambient mode carries a point of f = mu to f = lambda in R^n. Manifold mode
does the same inside g = 0 and keeps the distance from the origin fixed.

Run:  python3 demos/05_fiber_transport.py
"""
from __future__ import annotations

import math

from bifval import flow
from bifval import geometry as geo
from bifval.expr import parse

exa2 = geo.ProblemPair(parse("y/(1+x^2)", 2), parse("x", 2))
res = flow.transport_ambient(exa2, [2.0, 1.5], 0.5)
print("ambient  (2, 1.5) -> f = 0.5:", res.endpoint, f"f_error {res.f_error:.1e}, {len(res.trajectory.times)} steps")
print("round trip error:", flow.round_trip(exa2, [2.0, 1.5], 0.5))

cyl = geo.ProblemPair(parse("y", 3), parse("0.5*x^2 + y^2 - 0.5", 3))
start = [math.sqrt(1 - 2 * 0.1**2), 0.1, 4.0]
res = flow.transport_on_manifold(cyl, start, -0.4)
print("manifold start", start, "-> y = -0.4:", res.endpoint.round(12))
print(f"  norm drift {res.norm_drift:.1e}, max |g| {res.max_g_abs:.1e}")

# A start on the Milnor set cannot move: the field vanishes there.
stuck = flow.transport_on_manifold(cyl, [0.0, math.sqrt(0.5), 3.0], 0.2)
print("Milnor start:", stuck.trajectory.termination)

# Trajectories export as CSV with one row per accepted step.
print(res.trajectory.to_csv().splitlines()[0])
