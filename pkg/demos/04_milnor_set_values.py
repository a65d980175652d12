"""Asymptotic values of f = y restricted to the elliptic cylinder
x^2/2 + y^2 = 1/2 in R^3, found from the Milnor set.

Far out on the cylinder the pair (f, ||x||^2) is critical along the two
lines x = 0, where f = +-1/sqrt(2).

Run:  python3 demos/04_milnor_set_values.py
"""
from __future__ import annotations

import math

from bifval import geometry as geo
from bifval.expr import parse
from bifval.scan import SweepConfig, scan_s_zero

f, g = parse("y", 3), parse("0.5*x^2 + y^2 - 0.5", 3)
report = scan_s_zero(f, g, SweepConfig(K=6, directions=512))
print("candidates:", report.values, " expected +-", 1 / math.sqrt(2))

p = geo.ProblemPair(f, g)
for c in report.candidates:
    x = c.witnesses[0].points[-1]
    r = geo.milnor_residual(p, x)
    print(f"  witness at radius {c.witnesses[0].radii[-1]:.0f}: x = {x.round(6)}, residual {r.value:.1e}")

# The manifold vector field v is undefined where grad g is parallel to x.
print("V-set point (1, 0, 0):", geo.milnor_residual(p, [1.0, 0.0, 0.0]))
print("v at (1, 0, 2):", geo.field_v(p, [1.0, 0.0, 2.0]))
