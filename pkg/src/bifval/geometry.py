"""Projected gradients, blended trivialization fields and the Milnor residual.

All functions take a :class:`ProblemPair` (the function ``f`` and the
constraint/foliation function ``g``) and a point of R^n. Vectorized helpers
(prefixed ``batch_``) work on arrays of points and never raise; they return
``nan`` where the scalar versions would raise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .expr import Expression, DimensionError, ExprDomainError

__all__ = [
    "ProblemPair",
    "FieldSample",
    "MilnorResidual",
    "GeometryError",
    "ZeroAxisError",
    "DegenerateGradientError",
    "DegeneratePairingError",
    "MilnorDegenerateError",
    "OffManifoldError",
    "project_orthogonal",
    "tangential_gradient",
    "bump_pair",
    "field_w",
    "field_u",
    "field_v",
    "field_v_by_projection",
    "milnor_residual",
    "sample_field",
]

GRAD_EPS = 1e-12  # ||grad g|| below this counts as degenerate
PAIR_EPS = 1e-12  # |<w, grad f>| < PAIR_EPS * ||w|| ||grad f|| is degenerate
MILNOR_EPS = 1e-12  # denominator of v below MILNOR_EPS * ||x||^2 ||grad g||^2
ON_MANIFOLD_TOL = 1e-8


class GeometryError(ArithmeticError):
    pass


class ZeroAxisError(GeometryError):
    pass


class DegenerateGradientError(GeometryError):
    def __init__(self, grad_norm: float, message: str = ""):
        self.grad_norm = grad_norm
        super().__init__(message or f"grad g is degenerate (||grad g|| = {grad_norm:.3e})")


class DegeneratePairingError(GeometryError):
    def __init__(self, pairing: float):
        self.pairing = pairing
        super().__init__(f"<w, grad f> = {pairing:.3e} is degenerate")


class MilnorDegenerateError(GeometryError):
    """x and grad g(x) are (numerically) parallel: x lies in the set V."""


class OffManifoldError(GeometryError):
    def __init__(self, g_value: float):
        self.g_value = g_value
        super().__init__(f"point is off the manifold g = 0 (g = {g_value:.3e})")


@dataclass(frozen=True)
class ProblemPair:
    f: Expression
    g: Expression

    def __post_init__(self):
        if self.f.n != self.g.n:
            raise DimensionError(f"arity mismatch: f has {self.f.n}, g has {self.g.n}")
        if self.f.n < 2:
            raise DimensionError("a problem pair needs n >= 2")

    @property
    def n(self) -> int:
        return self.f.n


class MilnorResidual(NamedTuple):
    value: float
    in_v_set: bool


@dataclass
class FieldSample:
    x: np.ndarray
    f_value: float
    g_value: float
    grad_f: np.ndarray
    grad_g: np.ndarray
    tangential: np.ndarray | None
    malgrange: float
    fiber_malgrange: float
    milnor_residual: float
    in_v_set: bool = False
    degenerate: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def vec(a):
            return None if a is None else [float(t) for t in a]

        def num(t):
            return None if t is None or not math.isfinite(t) else float(t)

        return {
            "x": vec(self.x),
            "f": num(self.f_value),
            "g": num(self.g_value),
            "grad_f": vec(self.grad_f),
            "grad_g": vec(self.grad_g),
            "tangential": vec(self.tangential),
            "malgrange": num(self.malgrange),
            "fiber_malgrange": num(self.fiber_malgrange),
            "milnor_residual": num(self.milnor_residual),
            "in_v_set": self.in_v_set,
            "degenerate": self.degenerate,
        }


def _vec(x, n: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or (n is not None and x.shape[0] != n):
        raise DimensionError(f"expected a vector of length {n}, got shape {x.shape}")
    return x


def _wedge2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """||a||^2 ||b||^2 - <a, b>^2 via the Lagrange identity (no cancellation)."""
    n = a.shape[-1]
    total = np.zeros(a.shape[:-1])
    for i in range(n):
        for j in range(i + 1, n):
            total = total + (a[..., i] * b[..., j] - a[..., j] * b[..., i]) ** 2
    return total


# ------------------------------------------------------------------ basic pieces


def project_orthogonal(w, a) -> np.ndarray:
    """w - (<w, a> / ||a||^2) a."""
    w = _vec(w)
    a = _vec(a, w.shape[0])
    aa = float(a @ a)
    if aa == 0.0 or math.sqrt(aa) < 1e-300:
        raise ZeroAxisError("cannot project orthogonally to a zero vector")
    return w - (float(w @ a) / aa) * a


def _grads(p: ProblemPair, x: np.ndarray):
    fv, gf = p.f.value_and_grad(x)
    gv, gg = p.g.value_and_grad(x)
    return fv, gf, gv, gg


def _check_grad_g(gf: np.ndarray, gg: np.ndarray) -> None:
    ng = float(np.linalg.norm(gg))
    if not ng >= GRAD_EPS:
        raise DegenerateGradientError(ng)


def _tangential(gf: np.ndarray, gg: np.ndarray) -> np.ndarray:
    return gf - (float(gf @ gg) / float(gg @ gg)) * gg


def tangential_gradient(p: ProblemPair, x) -> np.ndarray:
    """Projection of grad f onto the tangent space of the level set of g through x."""
    x = _vec(x, p.n)
    gf = p.f.gradient(x)
    gg = p.g.gradient(x)
    _check_grad_g(gf, gg)
    return _tangential(gf, gg)


def _sigma(t: float) -> float:
    """Smooth step: 0 for t <= 0, 1 for t >= 1, strictly between otherwise."""
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    a = math.exp(-1.0 / t)
    b = math.exp(-1.0 / (1.0 - t))
    return a / (a + b)


def bump_pair(x, R: float) -> tuple[float, float]:
    """(alpha, beta): alpha = 1 inside the ball of radius R, 0 outside R + 1; beta = 1 - alpha."""
    if not R > 0:
        raise ValueError("R must be positive")
    x = _vec(x)
    r2 = float(x @ x)
    beta = _sigma((r2 - R * R) / (2.0 * R + 1.0))
    return 1.0 - beta, beta


# ------------------------------------------------------------------------ fields


def field_w(p: ProblemPair, x, R: float) -> np.ndarray:
    x = _vec(x, p.n)
    alpha, beta = bump_pair(x, R)
    gf = p.f.gradient(x)
    if beta == 0.0:
        return gf
    gg = p.g.gradient(x)
    _check_grad_g(gf, gg)
    return alpha * gf + beta * _tangential(gf, gg)


def field_u(p: ProblemPair, x, R: float) -> np.ndarray:
    """w / <w, grad f>, so that <grad f, u> = 1."""
    x = _vec(x, p.n)
    alpha, beta = bump_pair(x, R)
    gf = p.f.gradient(x)
    if beta == 0.0:
        w = gf
    else:
        gg = p.g.gradient(x)
        _check_grad_g(gf, gg)
        w = alpha * gf + beta * _tangential(gf, gg)
    pairing = float(w @ gf)
    scale = float(np.linalg.norm(w) * np.linalg.norm(gf))
    if not abs(pairing) > PAIR_EPS * scale:
        raise DegeneratePairingError(pairing)
    return w / pairing


def _manifold_pieces(p: ProblemPair, x: np.ndarray, tol: float):
    fv, gf, gv, gg = _grads(p, x)
    if abs(gv) > tol:
        raise OffManifoldError(gv)
    _check_grad_g(gf, gg)
    return gf, gg


def _v_closed_form(gf: np.ndarray, gg: np.ndarray, x: np.ndarray) -> np.ndarray:
    xx = float(x @ x)
    gg2 = float(gg @ gg)
    den = float(_wedge2(x, gg))
    if not den > MILNOR_EPS * xx * gg2:
        raise MilnorDegenerateError(
            "x and grad g(x) are linearly dependent; v is undefined (x in V)"
        )
    gx = float(gg @ x)
    gfg = float(gg @ gf)
    xf = float(x @ gf)
    cx = (gx * gfg - gg2 * xf) / den
    cg = (gx * xf - xx * gfg) / den
    return gf + cx * x + cg * gg


def field_v(p: ProblemPair, x, tol: float = ON_MANIFOLD_TOL) -> np.ndarray:
    """Field on M = g^{-1}(0) tangent to M and to the sphere through x."""
    x = _vec(x, p.n)
    gf, gg = _manifold_pieces(p, x, tol)
    return _v_closed_form(gf, gg, x)


def field_v_by_projection(p: ProblemPair, x, tol: float = ON_MANIFOLD_TOL) -> np.ndarray:
    """Same field as :func:`field_v`, computed as two successive projections."""
    x = _vec(x, p.n)
    gf, gg = _manifold_pieces(p, x, tol)
    pm_x = project_orthogonal(x, gg)
    if not float(pm_x @ pm_x) > MILNOR_EPS * float(x @ x):
        raise MilnorDegenerateError(
            "x and grad g(x) are linearly dependent; v is undefined (x in V)"
        )
    return project_orthogonal(project_orthogonal(gf, gg), pm_x)


def _residual(gf: np.ndarray, gg: np.ndarray, x: np.ndarray):
    """Normalized Milnor residual and V-flag, vectorized over leading axes.

    The Lagrange-identity numerator ||a||^2 ||b||^2 - <a, b>^2 (a = grad f_M,
    b = tangential part of x) is divided by ||grad f||^2 ||x||^2, which bounds
    it from above. The result lies in [0, 1], is invariant under rescaling of
    f, g and x, and vanishes both where a and b are parallel and where
    grad f_M = 0.
    """
    gg2 = np.sum(gg * gg, axis=-1)
    tan = gf - (np.sum(gf * gg, axis=-1) / gg2)[..., None] * gg
    pmx = x - (np.sum(x * gg, axis=-1) / gg2)[..., None] * gg
    xx = np.sum(x * x, axis=-1)
    B = np.sum(pmx * pmx, axis=-1)
    in_v = ~(B > MILNOR_EPS * xx)
    num = _wedge2(tan, pmx)
    scale = np.sum(gf * gf, axis=-1) * xx
    r = num / (scale * (1.0 + _EPS) + _TINY)
    r = np.where(in_v, 0.0, np.clip(r, 0.0, 1.0))
    return r, in_v


_EPS = np.finfo(float).eps
_TINY = np.finfo(float).tiny


def milnor_residual(p: ProblemPair, x, tol: float = ON_MANIFOLD_TOL) -> MilnorResidual:
    """Scale-free defect of linear dependence between grad f_M(x) and the
    tangential part of x.

    Zero exactly on the Milnor set of f restricted to M (critical points of
    the pair (f_M, ||x||^2)); points where x is parallel to grad g are
    flagged as belonging to V.
    """
    x = _vec(x, p.n)
    gf, gg = _manifold_pieces(p, x, tol)
    r, in_v = _residual(gf, gg, x)
    return MilnorResidual(float(r), bool(in_v))


def sample_field(p: ProblemPair, x, R: float | None = None) -> FieldSample:
    """Evaluate every pointwise quantity at ``x``, marking degeneracies instead of raising."""
    x = _vec(x, p.n)
    nx = float(np.linalg.norm(x))
    try:
        fv, gf, gv, gg = _grads(p, x)
    except ExprDomainError as exc:
        nan = float("nan")
        return FieldSample(x, nan, nan, None, None, None, nan, nan, nan, degenerate=str(exc))
    sample = FieldSample(
        x=x,
        f_value=fv,
        g_value=gv,
        grad_f=gf,
        grad_g=gg,
        tangential=None,
        malgrange=nx * float(np.linalg.norm(gf)),
        fiber_malgrange=float("nan"),
        milnor_residual=float("nan"),
    )
    try:
        _check_grad_g(gf, gg)
    except DegenerateGradientError as exc:
        sample.degenerate = str(exc)
        return sample
    tan = _tangential(gf, gg)
    sample.tangential = tan
    sample.fiber_malgrange = nx * float(np.linalg.norm(tan))
    r, in_v = _residual(gf, gg, x)
    sample.milnor_residual = float(r)
    sample.in_v_set = bool(in_v)
    if R is not None:
        sample.extra["bump"] = bump_pair(x, R)
    return sample


# -------------------------------------------------------------------- batch forms


def batch_tangential(gf: np.ndarray, gg: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return gf - (np.sum(gf * gg, axis=-1) / np.sum(gg * gg, axis=-1))[..., None] * gg


def batch_grad_g_ok(gf: np.ndarray, gg: np.ndarray) -> np.ndarray:
    return np.linalg.norm(gg, axis=-1) >= GRAD_EPS


def batch_residual(gf: np.ndarray, gg: np.ndarray, x: np.ndarray):
    with np.errstate(all="ignore"):
        return _residual(gf, gg, x)
