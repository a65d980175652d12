"""Sphere sweeps for asymptotic critical values and related candidate sets.

Three sweeps share one pipeline: for each radius of a geometric sequence,
sample low-discrepancy directions, locally minimize a quantity on the sphere
(or on its intersection with a level set of ``g``), keep the distinct local
minima as a *layer*, link layers across radii into witness sequences whose
f-values stay together, and cluster the limiting f-values into candidates.

Everything reported is a *candidate*: the sweep gives numerical evidence, not
a proof of membership.
"""
from __future__ import annotations

import csv
import io
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm, qmc

from . import geometry as geo
from .expr import Expression, DimensionError

__all__ = [
    "SweepConfig",
    "WitnessSequence",
    "Candidate",
    "AsymptoticReport",
    "SliceResult",
    "GSVerdict",
    "ScanError",
    "sphere_directions",
    "scan_k_infinity",
    "check_gS",
    "scan_s_zero",
    "refine_candidate",
    "cluster_values",
    "decay_fit",
]

DECAY_SLOPE = -0.25
MILNOR_WITNESS = 1e-8
NEWTON_TOL = 1e-10
NEWTON_ITERS = 50
STATIONARY = 1e-8  # r * ||tangential grad of the log objective|| below this stops descent
MIN_DECREASE = 1e-10  # accepted decrease of the log objective below this stops descent
FIBER_ZERO = 1e-10  # ||grad_g f|| <= FIBER_ZERO * ||grad f|| counts as zero

Interval = tuple[float, float]


class ScanError(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    r0: float = 10.0
    q: float = 2.0
    K: int = 12
    directions: int = 4096
    f_window: Interval | None = None
    refine_iters: int = 100
    seed: int = 0
    slice_directions: int = 256
    slices_per_interval: int = 21
    slice_cap: float = 10.0
    max_witnesses: int = 64
    max_seconds: float | None = None

    def __post_init__(self):
        if not self.q > 1:
            raise ValueError("radius ratio q must exceed 1")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if self.K < 0 or self.directions < 1 or self.slice_directions < 1:
            raise ValueError("counts must be positive")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be non-negative")

    @property
    def radii(self) -> np.ndarray:
        return self.r0 * self.q ** np.arange(self.K + 1, dtype=float)

    def to_dict(self) -> dict:
        d = {
            "r0": self.r0,
            "q": self.q,
            "K": self.K,
            "directions": self.directions,
            "f_window": _interval_json(self.f_window),
            "refine_iters": self.refine_iters,
            "seed": self.seed,
            "slice_directions": self.slice_directions,
            "slices_per_interval": self.slices_per_interval,
            "slice_cap": self.slice_cap,
            "max_witnesses": self.max_witnesses,
            "max_seconds": self.max_seconds,
        }
        return d


def _interval_json(iv):
    if iv is None:
        return None
    return [_jnum(iv[0]), _jnum(iv[1])]


def _jnum(v):
    v = float(v)
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class WitnessSequence:
    radii: list[float]
    points: list[np.ndarray]
    f_values: list[float]
    quantity_values: list[float]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.radii)

    def to_dict(self) -> dict:
        return {
            "radii": [float(r) for r in self.radii],
            "points": [[float(c) for c in p] for p in self.points],
            "f_values": [float(v) for v in self.f_values],
            "quantity_values": [float(v) for v in self.quantity_values],
            **({"meta": {k: _jnum(v) for k, v in self.meta.items()}} if self.meta else {}),
        }

    def to_csv(self) -> str:
        n = len(self.points[0]) if self.points else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["radius"] + [f"x_{i + 1}" for i in range(n)] + ["f", "quantity"])
        for r, p, fv, qv in zip(self.radii, self.points, self.f_values, self.quantity_values):
            w.writerow([repr(float(r))] + [repr(float(c)) for c in p] + [repr(float(fv)), repr(float(qv))])
        return buf.getvalue()


@dataclass
class Candidate:
    value: float
    confidence: float
    witnesses: list[WitnessSequence]

    def to_dict(self) -> dict:
        return {
            "value": float(self.value),
            "confidence": float(self.confidence),
            "witnesses": [w.to_dict() for w in self.witnesses],
        }


@dataclass
class AsymptoticReport:
    kind: str  # "K_inf", "K_inf_gS" or "S_zero"
    candidates: list[Candidate]
    swept_config: SweepConfig
    non_candidates_floor: float
    f: Expression
    g: Expression | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def values(self) -> list[float]:
        return [c.value for c in self.candidates]

    @property
    def partial(self) -> bool:
        return bool(self.diagnostics.get("partial", False))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "f": self.f.to_text(),
            "g": None if self.g is None else self.g.to_text(),
            "candidates": [c.to_dict() for c in self.candidates],
            "swept_config": self.swept_config.to_dict(),
            "non_candidates_floor": _jnum(self.non_candidates_floor),
            "diagnostics": _json_clean(self.diagnostics),
        }


def _json_clean(obj):
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return _jnum(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _json_clean(obj.tolist())
    return obj


# ------------------------------------------------------------------- sampling


def sphere_directions(n: int, m: int, seed: int) -> np.ndarray:
    """``m`` unit vectors in R^n from a scrambled Sobol sequence pushed through
    the Gaussian quantile map; reproducible for a given seed."""
    sampler = qmc.Sobol(d=n, scramble=True, seed=np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = sampler.random(m)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    z = norm.ppf(u)
    nz = np.linalg.norm(z, axis=1)
    bad = nz == 0
    z[bad] = 1.0
    nz[bad] = math.sqrt(n)
    return z / nz[:, None]


# ----------------------------------------------------------------- statistics


def decay_fit(radii: Sequence[float], quantities: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of log(quantity) against log(radius), and R^2."""
    r = np.log(np.asarray(radii, dtype=float))
    q = np.asarray(quantities, dtype=float)
    tiny = np.finfo(float).tiny
    y = np.log(np.maximum(q, tiny))
    if len(r) < 2:
        return 0.0, 0.0
    rc = r - r.mean()
    yc = y - y.mean()
    sxx = float(rc @ rc)
    slope = float(rc @ yc) / sxx
    ss_tot = float(yc @ yc)
    if ss_tot == 0.0:
        return slope, 1.0
    ss_res = float(np.sum((yc - slope * rc) ** 2))
    return slope, max(0.0, 1.0 - ss_res / ss_tot)


def _decay_confidence(radii, quantities) -> float:
    slope, r2 = decay_fit(radii, quantities)
    return float(np.clip(-slope, 0.0, 1.0) * r2)


def _gap(values: np.ndarray) -> float:
    if values.size == 0:
        return 1e-3
    return max(1e-3, 1e-2 * float(values.max() - values.min()))


def cluster_values(values: Sequence[float]) -> list[list[int]]:
    """1-D single-linkage clusters (index lists) with a scale-aware gap threshold."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return []
    order = np.argsort(v, kind="stable")
    tau = _gap(v)
    groups = [[int(order[0])]]
    for a, b in zip(order[:-1], order[1:]):
        if v[b] - v[a] > tau:
            groups.append([])
        groups[-1].append(int(b))
    return groups


# -------------------------------------------------------------------- layers


@dataclass
class _Layer:
    radius: float
    points: np.ndarray
    f: np.ndarray
    q: np.ndarray
    meta: dict = field(default_factory=dict)


def _dedupe(X: np.ndarray, f: np.ndarray, q: np.ndarray, r: float, cap: int):
    """Keep distinct minima (separated by > 1e-6 r), lowest quantity first."""
    if X.shape[0] == 0:
        return X, f, q
    order = np.lexsort((np.arange(len(q)), q))
    X, f, q = X[order], f[order], q[order]
    tree = cKDTree(X)
    removed = np.zeros(len(q), dtype=bool)
    keep = []
    for i in range(len(q)):
        if removed[i]:
            continue
        keep.append(i)
        if len(keep) >= cap:
            break
        for j in tree.query_ball_point(X[i], 1e-6 * r):
            removed[j] = True
    keep = np.array(keep, dtype=int)
    return X[keep], f[keep], q[keep]


def _in_window(f: np.ndarray, window: Interval | None) -> np.ndarray:
    if window is None:
        return np.isfinite(f)
    return (f >= window[0]) & (f <= window[1])


# --------------------------------------------------------------- minimizers


def _sphere_descent(X: np.ndarray, r: float, objective, iters: int) -> np.ndarray:
    """Projected (geodesic) gradient descent on the sphere ||x|| = r with Armijo
    backtracking, vectorized over the rows of X.

    ``objective(X, order)`` returns ``h`` (order 0) or ``(h, grad h)`` (order 1).
    """
    X = X.copy()
    m = X.shape[0]
    theta = np.full(m, 0.1)
    active = np.ones(m, dtype=bool)
    for _ in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        h, gr = objective(X[idx], 1)
        xh = X[idx] / r
        gt = gr - np.sum(gr * xh, axis=1)[:, None] * xh
        gn = np.linalg.norm(gt, axis=1)
        ok = np.isfinite(h) & np.isfinite(gn) & (r * gn > STATIONARY)
        active[idx[~ok]] = False
        idx, h, xh, gt, gn = idx[ok], h[ok], xh[ok], gt[ok], gn[ok]
        if idx.size == 0:
            break
        d = -gt / gn[:, None]
        slope = r * gn  # |d h / d theta| at theta = 0
        th = np.minimum(theta[idx] * 2.0, 0.5)
        pending = np.ones(idx.size, dtype=bool)
        stalled = np.zeros(idx.size, dtype=bool)
        newX = X[idx].copy()
        for _bt in range(40):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            c, s = np.cos(th[p]), np.sin(th[p])
            trial = r * (c[:, None] * xh[p] + s[:, None] * d[p])
            ht = objective(trial, 0)
            good = np.isfinite(ht) & (ht <= h[p] - 1e-4 * th[p] * slope[p])
            stalled[p[good]] = h[p[good]] - ht[good] < MIN_DECREASE
            newX[p[good]] = trial[good]
            pending[p[good]] = False
            th[p[~good]] *= 0.5
            tiny = th < 1e-13
            pending &= ~tiny
        moved = ~pending & (th >= 1e-13)
        X[idx[moved]] = newX[moved]
        theta[idx] = th
        active[idx[~moved | stalled]] = False
    return X


def _project_intersection(X: np.ndarray, r: float, g: Expression, s: float):
    """Gauss-Newton onto {||x|| = r, g(x) = s}; returns (points, converged mask)."""
    X = X.copy()
    m = X.shape[0]
    done = np.zeros(m, dtype=bool)
    polished = np.zeros(m, dtype=bool)
    alive = np.ones(m, dtype=bool)
    for _ in range(NEWTON_ITERS + 1):
        idx = np.flatnonzero(alive & ~polished)
        if idx.size == 0:
            break
        Y = X[idx]
        gv, gg = g.batch(Y)
        nx = np.linalg.norm(Y, axis=1)
        F1 = (nx * nx - r * r) / (2.0 * r)
        F2 = gv - s
        conv = (np.abs(nx - r) <= NEWTON_TOL * r) & (np.abs(F2) <= NEWTON_TOL)
        # one extra Newton step after convergence drives residuals to round-off
        polished[idx[conv & done[idx]]] = True
        done[idx[conv]] = True
        a11 = np.sum(Y * Y, axis=1) / (r * r)
        a12 = np.sum(Y * gg, axis=1) / r
        a22 = np.sum(gg * gg, axis=1)
        det = a11 * a22 - a12 * a12
        with np.errstate(all="ignore"):
            l1 = (a22 * F1 - a12 * F2) / det
            l2 = (-a12 * F1 + a11 * F2) / det
            step = -(l1[:, None] * Y / r + l2[:, None] * gg)
        sn = np.linalg.norm(step, axis=1)
        big = sn > 0.5 * r
        step[big] *= (0.5 * r / sn[big])[:, None]
        bad = ~np.isfinite(step).all(axis=1) | ~(det > 1e-14 * a11 * a22)
        alive[idx[bad & ~done[idx]]] = False
        upd = ~bad & ~polished[idx]
        X[idx[upd]] = Y[upd] + step[upd]
    gv, _ = g.batch(X)
    nx = np.linalg.norm(X, axis=1)
    ok = alive & done & (np.abs(nx - r) <= NEWTON_TOL * r) & (np.abs(gv - s) <= NEWTON_TOL)
    return X, ok


def _intersection_descent(
    X: np.ndarray, r: float, g: Expression, s: float, h_fun: Callable[[np.ndarray], np.ndarray], iters: int
):
    """Minimize h along {||x|| = r, g = s}: central-difference gradient projected
    onto the tangent space of the intersection, Armijo backtracking, and a
    Gauss-Newton retraction after every trial step."""
    X = X.copy()
    m, n = X.shape
    if n <= 2 or m == 0:
        return X
    step = np.full(m, 0.05 * r)
    active = np.ones(m, dtype=bool)
    for _ in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Y = X[idx]
        h = h_fun(Y)
        eps = 1e-6 * np.maximum(1.0, np.abs(Y))
        stencil = []
        for i in range(n):
            for sign in (1.0, -1.0):
                Z = Y.copy()
                Z[:, i] += sign * eps[:, i]
                stencil.append(Z)
        hv = h_fun(np.concatenate(stencil)).reshape(2 * n, -1)
        grad = np.stack([(hv[2 * i] - hv[2 * i + 1]) / (2 * eps[:, i]) for i in range(n)], axis=1)
        _, gg = g.batch(Y)
        # orthonormal basis of span{x, grad g}, then project the gradient off it
        e1 = Y / np.linalg.norm(Y, axis=1)[:, None]
        e2 = gg - np.sum(gg * e1, axis=1)[:, None] * e1
        n2 = np.linalg.norm(e2, axis=1)
        with np.errstate(all="ignore"):
            e2 = e2 / n2[:, None]
        gt = grad - np.sum(grad * e1, axis=1)[:, None] * e1
        gt = gt - np.nan_to_num(np.sum(gt * e2, axis=1))[:, None] * np.nan_to_num(e2)
        gn = np.linalg.norm(gt, axis=1)
        ok = np.isfinite(h) & np.isfinite(gn) & (r * gn > STATIONARY)
        active[idx[~ok]] = False
        idx, Y, h, gt, gn = idx[ok], Y[ok], h[ok], gt[ok], gn[ok]
        if idx.size == 0:
            break
        d = -gt / gn[:, None]
        st = np.minimum(step[idx] * 2.0, 0.25 * r)
        pending = np.ones(idx.size, dtype=bool)
        stalled = np.zeros(idx.size, dtype=bool)
        newY = Y.copy()
        for _bt in range(40):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            trial, conv = _project_intersection(Y[p] + st[p][:, None] * d[p], r, g, s)
            ht = h_fun(trial)
            good = conv & np.isfinite(ht) & (ht <= h[p] - 1e-4 * st[p] * gn[p])
            stalled[p[good]] = h[p[good]] - ht[good] < MIN_DECREASE
            newY[p[good]] = trial[good]
            pending[p[good]] = False
            st[p[~good]] *= 0.5
            pending &= ~(st < 1e-13 * r)
        moved = ~pending & (st >= 1e-13 * r)
        X[idx[moved]] = newY[moved]
        step[idx] = st
        active[idx[~moved | stalled]] = False
    return X


# ------------------------------------------------------------ per-kind layers

_TINY = 1e-300


def _kinf_objective(f: Expression):
    def objective(X, order):
        if order == 0:
            _, gf = f.batch(X, 1)
            return np.log(np.sum(gf * gf, axis=1) + _TINY)
        _, gf, H = f.batch(X, 2)
        s = np.sum(gf * gf, axis=1) + _TINY
        return np.log(s), 2.0 * np.einsum("mij,mj->mi", H, gf) / s[:, None]

    return objective


def _kinf_layer(f: Expression, r: float, dirs: np.ndarray, cfg: SweepConfig, stats: dict) -> _Layer:
    X = _sphere_descent(r * dirs, r, _kinf_objective(f), cfg.refine_iters)
    fv, gf = f.batch(X)
    q = np.linalg.norm(X, axis=1) * np.linalg.norm(gf, axis=1)
    good = np.isfinite(fv) & np.isfinite(q)
    stats["domain_errors"] += int(np.sum(~good))
    good &= _in_window(fv, cfg.f_window)
    X, fv, q = _dedupe(X[good], fv[good], q[good], r, cfg.max_witnesses)
    return _Layer(r, X, fv, q)


def _milnor_h(f: Expression, g: Expression):
    def h(X):
        _, gf = f.batch(X)
        _, gg = g.batch(X)
        res, _ = geo.batch_residual(gf, gg, X)
        return np.log(res + _TINY)

    return h


def _szero_layer(f, g, r, dirs, cfg, stats) -> _Layer:
    X, ok = _project_intersection(r * dirs, r, g, 0.0)
    stats["newton_failures"] += int(np.sum(~ok))
    X = X[ok]
    if X.shape[0] == 0:
        stats["empty_radii"].append(float(r))
        return _Layer(r, X, np.zeros(0), np.zeros(0))
    X = _intersection_descent(X, r, g, 0.0, _milnor_h(f, g), cfg.refine_iters)
    fv, gf = f.batch(X)
    gv, gg = g.batch(X)
    res, in_v = geo.batch_residual(gf, gg, X)
    good = np.isfinite(fv) & np.isfinite(res)
    stats["domain_errors"] += int(np.sum(~good))
    good &= geo.batch_grad_g_ok(gf, gg) & (np.abs(gv) <= NEWTON_TOL)
    good &= res < MILNOR_WITNESS
    good &= _in_window(fv, cfg.f_window)
    X, fv, q = _dedupe(X[good], fv[good], res[good], r, cfg.max_witnesses)
    return _Layer(r, X, fv, q)


def _fiber_h(f: Expression, g: Expression):
    def h(X):
        _, gf = f.batch(X)
        _, gg = g.batch(X)
        t = geo.batch_tangential(gf, gg)
        return np.log(np.sum(t * t, axis=1) + _TINY)

    return h


# ------------------------------------------------------------------- chaining


def _link_layers(layers: list[_Layer]) -> list[list[tuple[int, int]]]:
    """Link each minimum to the closest (in direction) minimum of the previous
    radius with an f-value within the scale-aware gap; return maximal chains as
    lists of (layer index, row index)."""
    parents: dict[tuple[int, int], tuple[int, int]] = {}
    has_child: set[tuple[int, int]] = set()
    for k in range(1, len(layers)):
        prev, cur = layers[k - 1], layers[k]
        if prev.f.size == 0 or cur.f.size == 0:
            continue
        tau = _gap(np.concatenate([prev.f, cur.f]))
        up = prev.points / np.linalg.norm(prev.points, axis=1)[:, None]
        uc = cur.points / np.linalg.norm(cur.points, axis=1)[:, None]
        cos = uc @ up.T
        close = np.abs(cur.f[:, None] - prev.f[None, :]) <= tau
        cos = np.where(close, cos, -np.inf)
        for j in range(cur.f.size):
            if not close[j].any():
                continue
            i = int(np.argmax(cos[j]))
            parents[(k, j)] = (k - 1, i)
            has_child.add((k - 1, i))
    chains = []
    for k, layer in enumerate(layers):
        for j in range(layer.f.size):
            node = (k, j)
            if node in has_child:
                continue
            path = [node]
            while path[-1] in parents:
                path.append(parents[path[-1]])
            chains.append(path[::-1])
    return chains


def _chain_to_witness(layers: list[_Layer], chain, meta=None) -> WitnessSequence:
    return WitnessSequence(
        radii=[layers[k].radius for k, _ in chain],
        points=[layers[k].points[j].copy() for k, j in chain],
        f_values=[float(layers[k].f[j]) for k, j in chain],
        quantity_values=[float(layers[k].q[j]) for k, j in chain],
        meta=dict(meta or {}),
    )


def _confidence(kind: str, w: WitnessSequence, n_radii: int) -> float:
    if kind == "S_zero":
        return float(min(1.0, len(w) / max(n_radii, 1)))
    if w.meta.get("zero"):
        return 1.0
    return _decay_confidence(w.radii, w.quantity_values)


def _assemble(kind: str, layers: list[_Layer], cfg: SweepConfig, f, g, stats, meta=None) -> AsymptoticReport:
    chains = _link_layers(layers)
    witnesses = []
    used: set[tuple[int, int]] = set()
    for chain in chains:
        if len(chain) < 3:
            continue
        w = _chain_to_witness(layers, chain, meta)
        if kind == "K_inf":
            slope, _ = decay_fit(w.radii, w.quantity_values)
            if not slope < DECAY_SLOPE:
                continue
        witnesses.append((w, chain))
    candidates = _candidates(kind, [w for w, _ in witnesses], len(layers))
    for w, chain in witnesses:
        used.update(chain)
    floor = math.inf
    for k, layer in enumerate(layers):
        for j in range(layer.q.size):
            if (k, j) not in used:
                floor = min(floor, float(layer.q[j]))
    return AsymptoticReport(
        kind=kind,
        candidates=candidates,
        swept_config=cfg,
        non_candidates_floor=floor if math.isfinite(floor) else float("nan"),
        f=f,
        g=g,
        diagnostics=stats,
    )


def _candidates(kind: str, witnesses: list[WitnessSequence], n_radii: int, keep: int = 4) -> list[Candidate]:
    if not witnesses:
        return []
    tails = [w.f_values[-1] for w in witnesses]
    out = []
    for group in cluster_values(tails):
        ws = [witnesses[i] for i in group]
        ws.sort(key=lambda w: (-len(w), w.quantity_values[-1], w.radii[0]))
        value = float(np.median([w.f_values[-1] for w in ws]))
        conf = max(_confidence(kind, w, n_radii) for w in ws)
        out.append(Candidate(value=value, confidence=conf, witnesses=ws[:keep]))
    out.sort(key=lambda c: c.value)
    return out


def _sweep(layer_fn, cfg: SweepConfig, stats: dict) -> list[_Layer]:
    layers = []
    start = time.monotonic()
    for r in cfg.radii:
        if cfg.max_seconds is not None and time.monotonic() - start > cfg.max_seconds:
            stats["partial"] = True
            break
        layers.append(layer_fn(float(r)))
    return layers


def _new_stats() -> dict:
    return {"domain_errors": 0, "newton_failures": 0, "empty_radii": [], "partial": False}


# ------------------------------------------------------------------ public API


def scan_k_infinity(f: Expression, cfg: SweepConfig | None = None) -> AsymptoticReport:
    """Candidates for the asymptotic critical values of f: limits of f along
    unbounded sequences with ||x|| ||grad f(x)|| -> 0."""
    cfg = cfg or SweepConfig()
    if f.n < 2:
        raise DimensionError("scan_k_infinity needs n >= 2")
    dirs = sphere_directions(f.n, cfg.directions, cfg.seed)
    stats = _new_stats()
    layers = _sweep(lambda r: _kinf_layer(f, r, dirs, cfg, stats), cfg, stats)
    return _assemble("K_inf", layers, cfg, f, None, stats)


def scan_s_zero(f: Expression, g: Expression, cfg: SweepConfig | None = None) -> AsymptoticReport:
    """Candidates for the asymptotic rho_0-nonregular values of f restricted to
    M = g^{-1}(0): limits of f along unbounded sequences in the Milnor set."""
    cfg = cfg or SweepConfig()
    geo.ProblemPair(f, g)
    dirs = sphere_directions(f.n, cfg.directions, cfg.seed)
    stats = _new_stats()
    layers = _sweep(lambda r: _szero_layer(f, g, r, dirs, cfg, stats), cfg, stats)
    return _assemble("S_zero", layers, cfg, f, g, stats)


# ---------------------------------------------------------------- (g,S) check


@dataclass
class SliceResult:
    s: float
    status: str  # "pass", "fail", "sparse" or "empty"
    radii: list[float]
    infima: list[float]
    slope: float
    samples: list[dict]
    reason: str = ""

    def to_dict(self) -> dict:
        return _json_clean(
            {
                "s": self.s,
                "status": self.status,
                "reason": self.reason,
                "radii": self.radii,
                "infima": self.infima,
                "slope": self.slope,
                "samples": self.samples,
            }
        )


@dataclass
class GSVerdict:
    nondegenerate: bool  # item (1): grad g != 0 on D_(U,R)
    contained: bool  # item (2): D_(U,R) inside g^{-1}(S)
    fiberwise: bool  # item (3): per-slice Malgrange bound
    evidence: dict
    slices: list[SliceResult]
    report: AsymptoticReport
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.nondegenerate and self.contained and self.fiberwise

    @property
    def items(self) -> tuple[bool, bool, bool]:
        return self.nondegenerate, self.contained, self.fiberwise

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "items": {
                "1_grad_g_nonzero": self.nondegenerate,
                "2_fibers_in_g_preimage_of_S": self.contained,
                "3_fiberwise_malgrange": self.fiberwise,
            },
            "evidence": _json_clean(self.evidence),
            "slices": [s.to_dict() for s in self.slices],
            "warnings": list(self.warnings),
            "report": self.report.to_dict(),
        }


def _slice_grid(S: Sequence[Interval], per_interval: int, cap: float) -> list[float]:
    grid: list[float] = []
    for a, b in S:
        lo, hi = max(a, -cap), min(b, cap)
        if not lo < hi:
            continue
        pts = np.linspace(lo, hi, per_interval + 2)
        keep_lo = math.isinf(a) or a < -cap
        keep_hi = math.isinf(b) or b > cap
        if keep_lo and keep_hi:
            pts = np.linspace(lo, hi, per_interval)
        else:
            pts = pts[(0 if keep_lo else 1) : (len(pts) if keep_hi else -1)]
        grid.extend(float(p) for p in pts)
        if a < 0.0 < b and 0.0 not in grid:
            grid.append(0.0)
    return sorted(set(grid))


def _in_S(values: np.ndarray, S: Sequence[Interval]) -> np.ndarray:
    ok = np.zeros(values.shape, dtype=bool)
    for a, b in S:
        ok |= (values > a) & (values < b)
    return ok


def check_gS(
    f: Expression,
    g: Expression,
    S: Sequence[Interval] = ((-math.inf, math.inf),),
    U: Interval = (-math.inf, math.inf),
    R: float = 1.0,
    cfg: SweepConfig | None = None,
    slices: Sequence[float] | None = None,
    max_samples: int = 32,
) -> GSVerdict:
    """Sampled test of the (g, S)-Malgrange condition of f over the window U.

    ``S`` is a finite union of open intervals. Item (3) is judged slice by
    slice: on each sampled level set g = s the infimum of ||x|| ||grad_g f||
    over the sphere of radius r must stay positive and must not decay as r
    grows; different slices may have different (even vanishing) bounds.
    """
    cfg = cfg or SweepConfig()
    if not R > 0:
        raise ValueError("R must be positive")
    geo.ProblemPair(f, g)
    S = [tuple(map(float, iv)) for iv in S]
    U = (float(U[0]), float(U[1]))
    n = f.n
    radii = [float(r) for r in cfg.radii if r > R]
    dirs = sphere_directions(n, cfg.directions, cfg.seed)
    slice_dirs = sphere_directions(n, cfg.slice_directions, cfg.seed + 1)
    stats = _new_stats()
    warns: list[str] = []

    # items (1) and (2): plain samples of D_(U,R) on every sphere
    n_samples = 0
    n_degenerate = 0
    n_outside = 0
    min_ratio = math.inf
    worst_outside = None
    for r in radii:
        X = r * dirs
        fv, gf = f.batch(X)
        gv, gg = g.batch(X)
        inside = np.isfinite(fv) & (fv >= U[0]) & (fv <= U[1]) & np.isfinite(gv)
        stats["domain_errors"] += int(np.sum(~np.isfinite(fv)))
        if not inside.any():
            continue
        n_samples += int(inside.sum())
        ratio = np.linalg.norm(gg[inside], axis=1) / (1.0 + np.linalg.norm(gf[inside], axis=1))
        min_ratio = min(min_ratio, float(ratio.min()))
        n_degenerate += int(np.sum(~geo.batch_grad_g_ok(gf[inside], gg[inside])))
        outside = ~_in_S(gv[inside], S)
        if outside.any() and worst_outside is None:
            worst_outside = X[inside][outside][0]
        n_outside += int(outside.sum())

    # item (3): per-slice infima of ||x|| ||grad_g f|| along {||x|| = r, g = s}
    grid = list(slices) if slices is not None else _slice_grid(S, cfg.slices_per_interval, cfg.slice_cap)
    h = _fiber_h(f, g)
    results: list[SliceResult] = []
    failing_layers: list[tuple[float, list[_Layer]]] = []
    for s in grid:
        layers: list[_Layer] = []
        samples: list[dict] = []
        for r in radii:
            X, ok = _project_intersection(r * slice_dirs, r, g, s)
            stats["newton_failures"] += int(np.sum(~ok))
            X = X[ok]
            if X.shape[0] == 0:
                continue
            X = _intersection_descent(X, r, g, s, h, cfg.refine_iters)
            fv, gf = f.batch(X)
            gv, gg = g.batch(X)
            good = np.isfinite(fv) & (fv >= U[0]) & (fv <= U[1])
            good &= geo.batch_grad_g_ok(gf, gg) & (np.abs(gv - s) <= NEWTON_TOL)
            if not good.any():
                continue
            X, fv, gf, gg = X[good], fv[good], gf[good], gg[good]
            t = geo.batch_tangential(gf, gg)
            tn = np.linalg.norm(t, axis=1)
            q = np.linalg.norm(X, axis=1) * tn
            rel = tn / np.maximum(np.linalg.norm(gf, axis=1), _TINY)
            X2, fv2, q2 = _dedupe(X, fv, q, r, max_samples)
            # recover per-point tangential norms for the kept rows
            _, gf2 = f.batch(X2)
            _, gg2 = g.batch(X2)
            tn2 = np.linalg.norm(geo.batch_tangential(gf2, gg2), axis=1)
            rel2 = tn2 / np.maximum(np.linalg.norm(gf2, axis=1), _TINY)
            layer = _Layer(r, X2, fv2, q2, meta={"zero": bool(np.any(rel2 <= FIBER_ZERO))})
            layers.append(layer)
            for xi, fi, ti, qi in zip(X2, fv2, tn2, q2):
                samples.append(
                    {"radius": r, "x": xi.tolist(), "f": float(fi), "tangential_norm": float(ti), "quantity": float(qi)}
                )
            del rel
        if not layers:
            results.append(SliceResult(s, "empty", [], [], float("nan"), [], "no samples on this slice"))
            warns.append(f"slice s={s!r}: no samples landed on g = s within U")
            continue
        rs = [L.radius for L in layers]
        infs = [float(L.q.min()) for L in layers]
        zero = any(L.meta["zero"] for L in layers)
        slope, _ = decay_fit(rs, infs) if len(layers) >= 2 else (float("nan"), 0.0)
        if zero:
            status, reason = "fail", "tangential gradient vanishes on the slice"
        elif len(layers) >= 3 and slope < DECAY_SLOPE:
            status, reason = "fail", f"infimum decays with radius (slope {slope:.3f})"
        elif len(layers) < 3:
            status, reason = "sparse", "fewer than three radii sampled"
        else:
            status, reason = "pass", ""
        results.append(SliceResult(s, status, rs, infs, slope, samples, reason))
        if status == "fail":
            failing_layers.append((s, layers))

    item1 = n_samples > 0 and n_degenerate == 0
    item2 = n_samples > 0 and n_outside == 0
    judged = [r for r in results if r.status in ("pass", "fail")]
    item3 = bool(judged) and all(r.status == "pass" for r in judged)
    if n_samples == 0:
        warns.append("no samples of D_(U,R) found on the swept spheres")

    witnesses: list[WitnessSequence] = []
    for s, layers in failing_layers:
        chain = []
        for L in layers:
            j = int(np.argmin(L.q))
            chain.append((L, j))
        witnesses.append(
            WitnessSequence(
                radii=[L.radius for L, _ in chain],
                points=[L.points[j].copy() for L, j in chain],
                f_values=[float(L.f[j]) for L, j in chain],
                quantity_values=[float(L.q[j]) for L, j in chain],
                meta={"slice": s, "zero": any(L.meta["zero"] for L, _ in chain)},
            )
        )
    report = AsymptoticReport(
        kind="K_inf_gS",
        candidates=_candidates("K_inf_gS", [w for w in witnesses if len(w) >= 3], len(radii)),
        swept_config=cfg,
        non_candidates_floor=min(
            (min(r.infima) for r in results if r.status == "pass"), default=float("nan")
        ),
        f=f,
        g=g,
        diagnostics=stats,
    )
    evidence = {
        "radii": radii,
        "domain_samples": n_samples,
        "degenerate_grad_g": n_degenerate,
        "min_grad_g_ratio": min_ratio if math.isfinite(min_ratio) else float("nan"),
        "outside_S": n_outside,
        "first_outside_point": None if worst_outside is None else worst_outside.tolist(),
        "slices": len(grid),
        "S": [list(iv) for iv in S],
        "U": list(U),
        "R": R,
    }
    return GSVerdict(item1, item2, item3, evidence, results, report, warns)


# ------------------------------------------------------------------- refinement


def _local_layer(report: AsymptoticReport, w: WitnessSequence, r: float, seeds: np.ndarray) -> _Layer:
    cfg = report.swept_config
    f, g = report.f, report.g
    stats = _new_stats()
    X0 = r * seeds
    if report.kind == "K_inf":
        return _kinf_layer(f, r, seeds, replace(cfg, max_witnesses=len(seeds)), stats)
    if report.kind == "S_zero":
        return _szero_layer(f, g, r, seeds, replace(cfg, max_witnesses=len(seeds)), stats)
    s = float(w.meta["slice"])
    X, ok = _project_intersection(X0, r, g, s)
    X = _intersection_descent(X[ok], r, g, s, _fiber_h(f, g), cfg.refine_iters)
    fv, gf = f.batch(X)
    _, gg = g.batch(X)
    q = np.linalg.norm(X, axis=1) * np.linalg.norm(geo.batch_tangential(gf, gg), axis=1)
    good = np.isfinite(fv) & np.isfinite(q)
    return _Layer(r, X[good], fv[good], q[good])


def refine_candidate(report: AsymptoticReport, index: int, extra_radii: int) -> AsymptoticReport:
    """Extend the witness sequences of one candidate to ``extra_radii`` further
    radii of the sweep's geometric sequence, searching densely around the
    previous witness directions, and recompute the candidate's confidence."""
    if not 0 <= index < len(report.candidates):
        raise IndexError(f"candidate index {index} out of range ({len(report.candidates)} candidates)")
    if extra_radii < 0:
        raise ValueError("extra_radii must be non-negative")
    cfg = report.swept_config
    n = report.f.n
    rng = np.random.default_rng([cfg.seed, index, extra_radii])
    new_cfg = replace(cfg, K=cfg.K + extra_radii)
    new_radii = new_cfg.radii[cfg.K + 1 :]
    cand = report.candidates[index]
    extended = []
    for w in cand.witnesses:
        w = WitnessSequence(list(w.radii), [p.copy() for p in w.points], list(w.f_values), list(w.quantity_values), dict(w.meta))
        for r in new_radii:
            u = w.points[-1] / np.linalg.norm(w.points[-1])
            cloud = u[None, :] + 0.05 * rng.standard_normal((63, n))
            seeds = np.vstack([u, cloud])
            seeds /= np.linalg.norm(seeds, axis=1)[:, None]
            layer = _local_layer(report, w, float(r), seeds)
            if layer.f.size == 0:
                break
            tau = _gap(np.asarray(w.f_values[-3:] + layer.f.tolist()))
            close = np.abs(layer.f - w.f_values[-1]) <= tau
            if not close.any():
                break
            j = int(np.flatnonzero(close)[np.argmin(layer.q[close])])
            w.radii.append(float(r))
            w.points.append(layer.points[j].copy())
            w.f_values.append(float(layer.f[j]))
            w.quantity_values.append(float(layer.q[j]))
        extended.append(w)
    n_radii = len(new_cfg.radii)
    conf = max(_confidence(report.kind, w, n_radii) for w in extended)
    new_cand = Candidate(value=float(np.median([w.f_values[-1] for w in extended])), confidence=conf, witnesses=extended)
    candidates = list(report.candidates)
    candidates[index] = new_cand
    diagnostics = dict(report.diagnostics)
    diagnostics["refined"] = list(diagnostics.get("refined", [])) + [{"index": index, "extra_radii": extra_radii}]
    return replace(report, candidates=candidates, swept_config=new_cfg, diagnostics=diagnostics)
