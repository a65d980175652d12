"""Fiber-to-fiber transport by integrating the trivialization vector fields.

Ambient mode integrates ``x' = (lam - mu) u(x)`` in R^n; manifold mode
integrates ``x' = (lam - mu) v(x) / <v(x), grad f_M(x)>`` on ``g = 0`` with a
Newton projection back onto the manifold after every accepted step. In both
cases ``mu = f(x0)`` is frozen, so ``f`` is affine in time along the exact
flow; the per-step departure from that law is recorded as a diagnostic.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.integrate import solve_ivp

from . import geometry as geo
from .expr import ExprDomainError
from .geometry import ProblemPair

__all__ = [
    "StepControls",
    "Trajectory",
    "TransportResult",
    "TransportError",
    "integrate_field",
    "integrate_stiff",
    "transport_ambient",
    "transport_on_manifold",
    "round_trip",
    "sample_fiber_points",
    "sample_manifold_points",
    "project_to_manifold",
]

Termination = Literal[
    "completed",
    "escaped_window",
    "degenerate_field",
    "entered_milnor_set",
    "projection_failed",
    "domain_error",
    "step_underflow",
    "max_steps",
    "stiff",
]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_LOW = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B - _B_LOW


@dataclass
class StepControls:
    rtol: float = 1e-9
    atol: float = 1e-12
    first_step: float | None = None
    min_step: float = 1e-14
    max_step: float = 0.25
    max_steps: int = 100_000
    escape_norm: float = 1e12


class FieldStop(Exception):
    """Raised by a right-hand side to end integration with a named cause."""

    def __init__(self, cause: str, message: str = ""):
        self.cause = cause
        super().__init__(message or cause)


@dataclass
class Trajectory:
    times: np.ndarray
    points: np.ndarray
    norms: np.ndarray
    termination: str
    message: str = ""
    f_values: np.ndarray | None = None
    g_values: np.ndarray | None = None
    affine_residuals: np.ndarray | None = None
    target_lambda: float = float("nan")
    start_mu: float = float("nan")

    @property
    def completed(self) -> bool:
        return self.termination == "completed"

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]

    def to_csv(self) -> str:
        n = self.points.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + ["f", "g", "norm"])
        nan = float("nan")
        for k, t in enumerate(self.times):
            fv = self.f_values[k] if self.f_values is not None else nan
            gv = self.g_values[k] if self.g_values is not None else nan
            w.writerow(
                [repr(float(t))]
                + [repr(float(c)) for c in self.points[k]]
                + [repr(float(fv)), repr(float(gv)), repr(float(self.norms[k]))]
            )
        return buf.getvalue()

    def to_dict(self, include_points: bool = False) -> dict:
        out = {
            "termination": self.termination,
            "message": self.message,
            "steps": int(len(self.times) - 1),
            "t_final": float(self.times[-1]),
            "target_lambda": float(self.target_lambda),
            "start_mu": float(self.start_mu),
        }
        if self.affine_residuals is not None and len(self.affine_residuals):
            out["max_affine_residual"] = float(np.max(self.affine_residuals))
        if include_points:
            out["times"] = [float(t) for t in self.times]
            out["points"] = [[float(c) for c in p] for p in self.points]
        return out


@dataclass
class TransportResult:
    start: np.ndarray
    endpoint: np.ndarray
    trajectory: Trajectory
    f_error: float
    g_error: float = float("nan")
    norm_drift: float = float("nan")
    max_affine_residual: float = float("nan")
    max_g_abs: float = float("nan")
    mode: str = "ambient"
    tol: float = 1e-8
    extra: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        if not self.trajectory.completed:
            return False
        if not self.f_error <= self.tol:
            return False
        if not self.max_affine_residual <= 10 * self.tol:
            return False
        if self.mode == "manifold":
            return self.max_g_abs <= 1e-10 and self.norm_drift <= 10 * self.tol
        return True

    def to_dict(self) -> dict:
        def num(t):
            return None if t is None or not math.isfinite(t) else float(t)

        return {
            "mode": self.mode,
            "success": self.success,
            "start": [float(c) for c in self.start],
            "endpoint": [float(c) for c in self.endpoint],
            "f_error": num(self.f_error),
            "g_error": num(self.g_error),
            "norm_drift": num(self.norm_drift),
            "max_affine_residual": num(self.max_affine_residual),
            "max_g_abs": num(self.max_g_abs),
            "trajectory": self.trajectory.to_dict(),
        }


class TransportError(RuntimeError):
    def __init__(self, result: TransportResult, leg: str):
        self.result = result
        self.leg = leg
        super().__init__(
            f"{leg} transport failed: {result.trajectory.termination} "
            f"(f_error={result.f_error:.3e}) {result.trajectory.message}"
        )


# ---------------------------------------------------------------------- integrator


def integrate_field(
    rhs: Callable[[np.ndarray], np.ndarray],
    x0,
    t_span: tuple[float, float] = (0.0, 1.0),
    controls: StepControls | None = None,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    accept: Callable[[float, np.ndarray], None] | None = None,
    stop_if_stiff: bool = False,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) integration of the autonomous system x' = rhs(x).

    Every accepted step is recorded. The local error estimate of a step from
    x to x_new must satisfy ||err|| <= rtol * max(||x||, ||x_new||) + atol.
    ``project`` (if given) maps each accepted point back onto a constraint
    set; ``accept`` is called with (t, x) after each accepted step and may
    raise :class:`FieldStop` to end integration early.

    ``rhs`` signals a degenerate field by raising :class:`FieldStop` or one of
    the geometry/expression errors; this ends integration with the matching
    termination cause when it happens at the current point, and shrinks the
    step when it happens at a trial stage.

    With ``stop_if_stiff`` the usual Dormand-Prince stiffness test (estimated
    h * Lipschitz constant above 3.25 on 15 accepted steps without 6
    consecutive quiet ones in between) ends integration with cause "stiff".
    """
    ctl = controls or StepControls()
    x = np.array(x0, dtype=float).reshape(-1)
    if x.ndim != 1 or x.ndim == 0:
        raise ValueError("x0 must be a vector")
    t0, t1 = float(t_span[0]), float(t_span[1])
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    times = [t0]
    points = [x.copy()]

    def finish(cause: str, message: str = "") -> Trajectory:
        P = np.array(points)
        return Trajectory(
            times=np.array(times),
            points=P,
            norms=np.linalg.norm(P, axis=1),
            termination=cause,
            message=message,
        )

    if span == 0.0:
        return finish("completed")

    def evaluate(y):
        k = np.asarray(rhs(y), dtype=float)
        if not np.all(np.isfinite(k)):
            raise FieldStop("degenerate_field", "non-finite field value")
        return k

    try:
        k1 = evaluate(x)
    except Exception as exc:  # noqa: BLE001 - classified below
        return finish(*_classify(exc))

    h = min(ctl.first_step, span) if ctl.first_step is not None else 1e-3 * span
    h = min(h, ctl.max_step * span)
    t = t0
    steps = 0
    stage_failure = None
    n_stiff = n_quiet = 0
    while True:
        remaining = abs(t1 - t)
        if remaining <= 1e-15 * max(1.0, abs(t1)):
            return finish("completed")
        if steps >= ctl.max_steps:
            return finish("max_steps", f"stopped after {steps} steps at t={t!r}")
        h = min(h, remaining)
        if h < ctl.min_step * max(1.0, abs(t)):
            if stage_failure is not None:
                return finish(*stage_failure)
            return finish("step_underflow", f"step {h:.3e} at t={t!r}")
        hs = direction * h
        ks = [k1]
        failed = None
        try:
            for i in range(1, 7):
                y = x + hs * sum(a * kj for a, kj in zip(_A[i], ks) if a != 0.0)
                ks.append(evaluate(y))
                if i == 5:
                    y_stage6 = y
        except Exception as exc:  # noqa: BLE001
            failed = exc
        if failed is not None:
            stage_failure = _classify(failed)
            h *= 0.25
            steps += 1
            continue
        x_new = x + hs * sum(b * kj for b, kj in zip(_B, ks) if b != 0.0)
        err = hs * sum(e * kj for e, kj in zip(_E, ks) if e != 0.0)
        tol_step = ctl.rtol * max(float(np.linalg.norm(x)), float(np.linalg.norm(x_new))) + ctl.atol
        ratio = float(np.linalg.norm(err)) / tol_step
        steps += 1
        if not math.isfinite(ratio):
            h *= 0.25
            continue
        if ratio <= 1.0:
            t_new = t1 if h >= remaining else t + hs
            if stop_if_stiff and project is None:
                dy = float(np.linalg.norm(x_new - y_stage6))
                if dy > 0.0 and h * float(np.linalg.norm(ks[6] - ks[5])) / dy > 3.25:
                    n_quiet = 0
                    n_stiff += 1
                    if n_stiff >= 15:
                        return finish("stiff", f"stiffness detected at t={t!r}")
                else:
                    n_quiet += 1
                    if n_quiet >= 6:
                        n_stiff = 0
            if project is not None:
                try:
                    x_new = project(x_new)
                except FieldStop as exc:
                    return finish(exc.cause, str(exc))
            t = t_new
            x = x_new
            stage_failure = None
            times.append(t)
            points.append(x.copy())
            if float(np.linalg.norm(x)) > ctl.escape_norm:
                return finish("escaped_window", f"||x|| exceeded {ctl.escape_norm:.3e}")
            try:
                if accept is not None:
                    accept(t, x)
                k1 = ks[6] if project is None else evaluate(x)
            except Exception as exc:  # noqa: BLE001
                if abs(t1 - t) <= 1e-15 * max(1.0, abs(t1)):
                    return finish("completed")
                return finish(*_classify(exc))
            factor = 5.0 if ratio == 0.0 else min(5.0, 0.9 * ratio ** -0.2)
            h = min(h * factor, ctl.max_step * span)
        else:
            h *= max(0.2, 0.9 * ratio ** -0.2)


def _classify(exc: Exception) -> tuple[str, str]:
    if isinstance(exc, FieldStop):
        return exc.cause, str(exc)
    if isinstance(exc, geo.MilnorDegenerateError):
        return "entered_milnor_set", str(exc)
    if isinstance(exc, geo.GeometryError):
        return "degenerate_field", str(exc)
    if isinstance(exc, ExprDomainError):
        return "domain_error", str(exc)
    raise exc


def integrate_stiff(
    rhs: Callable[[np.ndarray], np.ndarray],
    x0,
    t_span: tuple[float, float] = (0.0, 1.0),
    controls: StepControls | None = None,
) -> Trajectory:
    """Implicit Radau IIA integration (scipy) recording every accepted step.

    Used as a fallback where the explicit pair stalls on stiff stretches of
    the transport fields. Field failures at trial points are reported to the
    solver as non-finite values so it shrinks the step; if the solver gives
    up, the last such failure names the termination cause.
    """
    ctl = controls or StepControls()
    x0 = np.array(x0, dtype=float).reshape(-1)
    last_failure: list[tuple[str, str]] = []

    def fun(_t, y):
        try:
            k = np.asarray(rhs(y), dtype=float)
        except Exception as exc:  # noqa: BLE001
            last_failure.append(_classify(exc))
            return np.full_like(y, np.nan)
        return k

    sol = solve_ivp(
        fun,
        (float(t_span[0]), float(t_span[1])),
        x0,
        method="Radau",
        rtol=max(ctl.rtol, 1e-12),
        atol=ctl.atol,
        max_step=ctl.max_step * abs(t_span[1] - t_span[0]) or np.inf,
    )
    P = np.ascontiguousarray(sol.y.T)
    if sol.status == 0:
        cause, message = "completed", ""
    elif last_failure:
        cause, message = last_failure[-1]
    else:
        cause, message = "step_underflow", sol.message
    return Trajectory(times=sol.t.copy(), points=P, norms=np.linalg.norm(P, axis=1), termination=cause, message=message)


# ----------------------------------------------------------------------- transports


def _controls_for(tol: float, controls: StepControls | None) -> StepControls:
    if controls is not None:
        return controls
    # position accuracy well below the fiber tolerance; f-drift is checked per step
    return StepControls(rtol=min(1e-9, tol * 1e-4), atol=min(1e-12, tol * 1e-6))


def _finalize(
    p: ProblemPair,
    traj: Trajectory,
    x0: np.ndarray,
    lam: float,
    mu: float,
    tol: float,
    mode: str,
) -> TransportResult:
    P = traj.points
    fvals = np.array([p.f.evaluate(q) for q in P])
    gvals = np.array([p.g.evaluate(q) for q in P])
    traj.f_values = fvals
    traj.g_values = gvals
    traj.target_lambda = lam
    traj.start_mu = mu
    traj.affine_residuals = np.abs(fvals - ((lam - mu) * traj.times + mu))
    end = P[-1]
    res = TransportResult(
        start=x0,
        endpoint=end,
        trajectory=traj,
        f_error=abs(float(fvals[-1]) - lam),
        max_affine_residual=float(np.max(traj.affine_residuals)),
        mode=mode,
        tol=tol,
    )
    if mode == "manifold":
        res.g_error = abs(float(gvals[-1]))
        res.max_g_abs = float(np.max(np.abs(gvals)))
        res.norm_drift = abs(float(np.linalg.norm(end)) - float(np.linalg.norm(x0)))
        res.extra["max_norm_drift"] = float(np.max(np.abs(traj.norms - np.linalg.norm(x0))))
    return res


def transport_ambient(
    p: ProblemPair,
    x,
    lam: float,
    R: float = 1.0,
    tol: float = 1e-8,
    controls: StepControls | None = None,
) -> TransportResult:
    """Carry ``x`` from its fiber f = f(x) to the fiber f = lam along u."""
    x0 = np.asarray(x, dtype=float).copy()
    mu = p.f.evaluate(x0)
    speed = lam - mu
    if speed == 0.0:
        def rhs(y):
            return np.zeros_like(y)
    else:
        def rhs(y):
            return speed * geo.field_u(p, y, R)

    ctl = _controls_for(tol, controls)
    traj = integrate_field(rhs, x0, (0.0, 1.0), ctl, stop_if_stiff=True)
    integrator = "dopri5"
    if traj.termination in ("stiff", "max_steps"):
        traj = integrate_stiff(rhs, x0, (0.0, 1.0), ctl)
        integrator = "radau"
    res = _finalize(p, traj, x0, lam, mu, tol, "ambient")
    res.extra["integrator"] = integrator
    return res


def _newton_onto_zero(g, y: np.ndarray, target: float = 1e-12, max_iter: int = 20) -> np.ndarray:
    for _ in range(max_iter):
        gv, gg = g.value_and_grad(y)
        if abs(gv) <= target:
            return y
        gg2 = float(gg @ gg)
        if gg2 == 0.0:
            break
        y = y - (gv / gg2) * gg
    gv = g.evaluate(y)
    if abs(gv) <= target:
        return y
    raise FieldStop("projection_failed", f"Newton projection left |g| = {abs(gv):.3e}")


def manifold_velocity(p: ProblemPair, y: np.ndarray, tol: float = geo.ON_MANIFOLD_TOL) -> np.ndarray:
    """v / <v, grad f_M>: the unit-speed (in f) field on M tangent to spheres."""
    gf = p.f.gradient(y)
    gv, gg = p.g.value_and_grad(y)
    if abs(gv) > tol:
        raise geo.OffManifoldError(gv)
    geo._check_grad_g(gf, gg)
    r, in_v = geo._residual(gf, gg, y)
    if in_v or not r > MILNOR_STOP:
        raise FieldStop("entered_milnor_set", f"Milnor residual {float(r):.3e}")
    v = geo._v_closed_form(gf, gg, y)
    tan = geo._tangential(gf, gg)
    pairing = float(v @ tan)
    if not abs(pairing) > geo.PAIR_EPS * float(np.linalg.norm(v) * np.linalg.norm(gf)):
        raise FieldStop("entered_milnor_set", f"<v, grad f_M> = {pairing:.3e}")
    return v / pairing


MILNOR_STOP = 1e-12


def transport_on_manifold(
    p: ProblemPair,
    x,
    lam: float,
    tol: float = 1e-8,
    controls: StepControls | None = None,
) -> TransportResult:
    """Carry ``x`` on M = g^{-1}(0) to M ∩ f^{-1}(lam) along v, keeping ||x|| fixed."""
    x0 = np.asarray(x, dtype=float).copy()
    g0 = p.g.evaluate(x0)
    if abs(g0) > max(tol, 1e-10):
        raise geo.OffManifoldError(g0)
    mu = p.f.evaluate(x0)
    speed = lam - mu
    if speed == 0.0:
        def rhs(y):
            return np.zeros_like(y)
    else:
        def rhs(y):
            return speed * manifold_velocity(p, y, tol=max(1e-6, 1e3 * tol))

    def project(y):
        return _newton_onto_zero(p.g, y)

    traj = integrate_field(rhs, x0, (0.0, 1.0), _controls_for(tol, controls), project=project)
    return _finalize(p, traj, x0, lam, mu, tol, "manifold")


def round_trip(
    p: ProblemPair,
    x,
    lam: float,
    mode: str = "ambient",
    R: float = 1.0,
    tol: float = 1e-8,
    controls: StepControls | None = None,
) -> float:
    """||Theta(Psi_1(x), f(x)) - x||: transport to lam and back to f(x)."""
    x0 = np.asarray(x, dtype=float)
    mu = p.f.evaluate(x0)
    if mode == "ambient":
        go = lambda y, target: transport_ambient(p, y, target, R, tol, controls)  # noqa: E731
    elif mode == "manifold":
        go = lambda y, target: transport_on_manifold(p, y, target, tol, controls)  # noqa: E731
    else:
        raise ValueError(f"unknown mode {mode!r}")
    fwd = go(x0, lam)
    if not fwd.success:
        raise TransportError(fwd, "forward")
    back = go(fwd.endpoint, mu)
    if not back.success:
        raise TransportError(back, "backward")
    return float(np.linalg.norm(back.endpoint - x0))


# ---------------------------------------------------------------- start points


def _shell_points(rng: np.random.Generator, n: int, count: int, rmin: float, rmax: float) -> np.ndarray:
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return d * rng.uniform(rmin, rmax, count)[:, None]


def _batch_newton(e, X: np.ndarray, target: np.ndarray, iters: int) -> np.ndarray:
    for _ in range(iters):
        v, gr = e.batch(X)
        with np.errstate(all="ignore"):
            X = X - ((v - target) / np.sum(gr * gr, axis=1))[:, None] * gr
    return X


def sample_fiber_points(
    f,
    count: int,
    rmin: float,
    rmax: float,
    mu_range: tuple[float, float] = (-1.0, 1.0),
    seed: int = 0,
    max_rounds: int = 50,
) -> np.ndarray:
    """``count`` points with f(x) = mu, mu uniform in ``mu_range`` and
    rmin <= ||x|| <= rmax: random shell points pushed onto their target
    fiber by gradient Newton steps, with rejection of the ones that fail to
    converge or leave the shell."""
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    have = 0
    for _ in range(max_rounds):
        m = max(2 * (count - have), 16)
        X = _shell_points(rng, f.n, m, rmin, rmax)
        mu = rng.uniform(mu_range[0], mu_range[1], m)
        X = _batch_newton(f, X, mu, 2000)
        v, _ = f.batch(X)
        nx = np.linalg.norm(X, axis=1)
        ok = np.isfinite(v) & (np.abs(v - mu) <= 1e-12 * (1 + np.abs(mu))) & (nx >= rmin) & (nx <= rmax)
        out.append(X[ok])
        have += int(ok.sum())
        if have >= count:
            break
    pts = np.concatenate(out)[:count] if out else np.zeros((0, f.n))
    if pts.shape[0] < count:
        raise RuntimeError(f"only {pts.shape[0]} of {count} fiber points found")
    return pts


def sample_manifold_points(g, count: int, rmin: float, rmax: float, seed: int = 0, max_rounds: int = 50) -> np.ndarray:
    """``count`` points on g = 0 (|g| <= 1e-12) with rmin <= ||x|| <= rmax."""
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    have = 0
    for _ in range(max_rounds):
        m = max(2 * (count - have), 16)
        X = _batch_newton(g, _shell_points(rng, g.n, m, rmin, rmax), np.zeros(m), 100)
        v, _ = g.batch(X)
        nx = np.linalg.norm(X, axis=1)
        ok = np.isfinite(v) & (np.abs(v) <= 1e-12) & (nx >= rmin) & (nx <= rmax)
        out.append(X[ok])
        have += int(ok.sum())
        if have >= count:
            break
    pts = np.concatenate(out)[:count] if out else np.zeros((0, g.n))
    if pts.shape[0] < count:
        raise RuntimeError(f"only {pts.shape[0]} of {count} manifold points found")
    return pts


def project_to_manifold(g, x, max_distance: float = 1e-3) -> np.ndarray:
    """Newton-project a start with |g(x)| <= max_distance onto g = 0; farther
    starts are rejected with OffManifoldError."""
    x = np.asarray(x, dtype=float)
    gv = g.evaluate(x)
    if abs(gv) > max_distance:
        raise geo.OffManifoldError(gv)
    try:
        return _newton_onto_zero(g, x.copy())
    except FieldStop as exc:
        raise geo.OffManifoldError(gv) from exc
