"""Sweep growing spheres for asymptotic critical values of f = y/(1+x^2).

Along the curve y = (1+x^2)/x, ||x|| ||grad f|| tends to zero while f stays
bounded, so 0 shows up as a candidate. A linear function has no such
values, and the sweep reports nothing.

Run:  python3 demos/02_asymptotic_critical_values.py
"""
from __future__ import annotations

from bifval.expr import parse
from bifval.scan import SweepConfig, refine_candidate, scan_k_infinity

f = parse("y/(1+x^2)", 2)
cfg = SweepConfig(K=8, directions=1024)
print("radii:", cfg.radii)

report = scan_k_infinity(f, cfg)
for c in report.candidates:
    print(f"candidate {c.value:+.3e}  confidence {c.confidence:.4f}  witnesses {len(c.witnesses)}")
    w = c.witnesses[0]
    for r, fv, q in zip(w.radii, w.f_values, w.quantity_values):
        print(f"    r = {r:8.1f}   f = {fv:+.3e}   ||x|| ||grad f|| = {q:.3e}")

# Extending the witnesses to three more radii should not lower confidence.
if report.candidates:
    refined = refine_candidate(report, 0, 3)
    print("confidence after refinement:", refined.candidates[0].confidence)

print("linear f candidates:", scan_k_infinity(parse("x + 2*y", 2), cfg).values)
