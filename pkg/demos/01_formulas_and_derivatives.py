"""Parse a formula, evaluate it with exact forward-mode derivatives, and
compare against a central difference.

Run:  python3 demos/01_formulas_and_derivatives.py
"""
from __future__ import annotations

import numpy as np

from bifval.expr import jacobian2, parse

f = parse("x - 3*x^5*y^2 + 2*x^7*y^3 + y*z", 3)
x = np.array([1.2, -0.4, 2.0])

print("formula      :", f.to_text())
print("value        :", f.evaluate(x))
print("gradient     :", f.gradient(x))

h = 1e-6
fd = [(f.evaluate(x + h * e) - f.evaluate(x - h * e)) / (2 * h) for e in np.eye(3)]
print("central diff :", np.array(fd))

H = f.hessian(x)
print("hessian symmetric:", np.allclose(H, H.T))

# A polynomial shear has Jacobian determinant identically one.
F1, F2 = parse("x + y^2", 2), parse("y", 2)
pts = np.random.default_rng(0).uniform(-5, 5, (5, 2))
print("Jacobian of (x + y^2, y) at 5 random points:", [jacobian2(F1, F2, p) for p in pts])

# The batch backend is lenient: points outside the domain give nan
# instead of raising, which is what the sphere sweeps rely on.
g = parse("log(x) + y", 2)
v, grad = g.batch(np.array([[1.0, 2.0], [-1.0, 2.0]]))
print("batch values :", v)
