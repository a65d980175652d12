"""Check the fiberwise (g, S) Malgrange condition on two examples.

For f = y/(1+x^2) and g = x, each vertical line x = s carries the linear
function y/(1+s^2), so the tangential gradient has constant norm
1/(1+s^2) on that slice. The global Malgrange bound fails, but every slice
has its own positive bound.

Run:  python3 demos/03_fiberwise_malgrange.py
"""
from __future__ import annotations

from bifval.expr import parse
from bifval.scan import SweepConfig, check_gS

cfg = SweepConfig(K=8, directions=1024, slice_directions=64)
f = parse("y/(1+x^2)", 2)

verdict = check_gS(f, parse("x", 2), cfg=cfg)
print("g = x       : items", verdict.items, "->", "pass" if verdict.passed else "fail")
for sl in verdict.slices[::5]:
    t = sl.samples[0]["tangential_norm"]
    print(f"    slice s = {sl.s:+6.2f}: ||grad_g f|| = {t:.6f}   1/(1+s^2) = {1 / (1 + sl.s**2):.6f}")

# Taking g = f makes every slice a level set of f, where the tangential
# gradient is zero: item 3 fails.
bad = check_gS(f, f, cfg=cfg)
print("g = f       : items", bad.items)
print("    first failing slice:", next(s.reason for s in bad.slices if s.status == "fail"))
