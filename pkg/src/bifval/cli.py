"""Command-line front end.

Subcommands::

    bifval scan {kinf,gs,szero} --problem FILE --out DIR
    bifval transport --problem FILE --out DIR [--lambda L] [--mode ambient|manifold]
    bifval examples {ex1,exa2,exa3,exa4,sec4,all} --out DIR

Problem files are TOML, reports are JSON (``report.json`` in the output
directory, written atomically) and witness sequences / trajectories are CSV.
Exit codes: 0 clean (no candidates, verdict pass, all examples pass),
2 findings (candidates found or a failed (g,S) item), 1 errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import re
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, corpus, flow
from . import geometry as geo
from .expr import Expression, ExprSyntaxError, parse
from .scan import SweepConfig, check_gS, scan_k_infinity, scan_s_zero

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

__all__ = [
    "SCHEMA_VERSION",
    "ProblemFile",
    "ProblemFileError",
    "cmd_scan",
    "cmd_transport",
    "cmd_examples",
    "main",
]

SCHEMA_VERSION = "1.0"
EXIT_CLEAN, EXIT_ERROR, EXIT_FINDINGS = 0, 1, 2

Interval = tuple[float, float]
_SWEEP_KEYS = {f.name for f in dataclasses.fields(SweepConfig)}
_TOL_KEYS = {"tol", "rtol", "atol", "max_steps"}


class ProblemFileError(ValueError):
    """Malformed problem file; the message names the file and, where known, the line."""


@dataclass
class ProblemFile:
    n: int
    f: str
    g: str | None = None
    S: list[Interval] = field(default_factory=lambda: [(-math.inf, math.inf)])
    U: Interval = (-math.inf, math.inf)
    R: float = 1.0
    sweep: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    transport: dict = field(default_factory=dict)
    source: str = "<memory>"
    digest: str = ""

    # filled by from_dict; formula errors are reported with file and line
    f_expr: Expression | None = field(default=None, repr=False)
    g_expr: Expression | None = field(default=None, repr=False)

    @classmethod
    def load(cls, path: str | os.PathLike) -> ProblemFile:
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ProblemFileError(f"{path}: cannot read problem file ({exc.strerror})") from exc
        return cls.from_text(raw.decode("utf-8"), source=str(path), raw=raw)

    @classmethod
    def from_text(cls, text: str, source: str = "<memory>", raw: bytes | None = None) -> ProblemFile:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ProblemFileError(f"{source}: {exc}") from exc
        digest = "sha256:" + hashlib.sha256(raw if raw is not None else text.encode("utf-8")).hexdigest()
        return cls.from_dict(data, source=source, text=text, digest=digest)

    @classmethod
    def from_dict(cls, data: dict, source: str = "<memory>", text: str = "", digest: str = "") -> ProblemFile:
        def fail(key: str, message: str):
            raise ProblemFileError(f"{source}{_line_of(text, key)}: {message}")

        unknown = set(data) - {"n", "f", "g", "S", "U", "R", "sweep", "tolerances", "transport"}
        if unknown:
            fail(sorted(unknown)[0], f"unknown key(s) {sorted(unknown)}")
        if "n" not in data or "f" not in data:
            fail("n", "problem needs both 'n' and 'f'")
        n = data["n"]
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            fail("n", "'n' must be a positive integer")
        for key in ("f", "g"):
            if key in data and not isinstance(data[key], str):
                fail(key, f"'{key}' must be a formula string")
        try:
            S = [_interval(iv) for iv in data.get("S", [[-math.inf, math.inf]])]
            U = _interval(data.get("U", [-math.inf, math.inf]))
        except (TypeError, ValueError) as exc:
            fail("S" if "S" in data else "U", str(exc))
        R = data.get("R", 1.0)
        if not isinstance(R, (int, float)) or not R > 0:
            fail("R", "'R' must be a positive number")
        sweep = dict(data.get("sweep", {}))
        if set(sweep) - _SWEEP_KEYS:
            fail("sweep", f"unknown sweep setting(s) {sorted(set(sweep) - _SWEEP_KEYS)}")
        if "f_window" in sweep and sweep["f_window"] is not None:
            sweep["f_window"] = _interval(sweep["f_window"])
        tolerances = dict(data.get("tolerances", {}))
        if set(tolerances) - _TOL_KEYS:
            fail("tolerances", f"unknown tolerance(s) {sorted(set(tolerances) - _TOL_KEYS)}")
        prob = cls(
            n=n,
            f=data["f"],
            g=data.get("g"),
            S=S,
            U=U,
            R=float(R),
            sweep=sweep,
            tolerances=tolerances,
            transport=dict(data.get("transport", {})),
            source=source,
            digest=digest or "sha256:" + hashlib.sha256(_canonical(data).encode()).hexdigest(),
        )
        for key in ("f", "g"):
            txt = getattr(prob, key)
            if txt is None:
                continue
            try:
                setattr(prob, f"{key}_expr", parse(txt, n))
            except ExprSyntaxError as exc:
                fail(key, f"in '{key}': {exc}")
        return prob

    def pair(self) -> geo.ProblemPair:
        if self.g_expr is None:
            raise ProblemFileError(f"{self.source}: this command needs 'g'")
        return geo.ProblemPair(self.f_expr, self.g_expr)

    def sweep_config(self, seed: int | None = None, radii: int | None = None, dirs: int | None = None) -> SweepConfig:
        kw = dict(self.sweep)
        if seed is not None:
            kw["seed"] = seed
        if radii is not None:
            kw["K"] = radii
        if dirs is not None:
            kw["directions"] = dirs
        try:
            return SweepConfig(**kw)
        except (TypeError, ValueError) as exc:
            raise ProblemFileError(f"{self.source}: invalid sweep settings: {exc}") from exc


def _line_of(text: str, key: str) -> str:
    m = re.search(rf"^\s*\[?{re.escape(key)}\]?\s*(=|$)", text, flags=re.MULTILINE)
    return f":{text.count(chr(10), 0, m.start()) + 1}" if m else ""


def _interval(iv) -> Interval:
    if not isinstance(iv, (list, tuple)) or len(iv) != 2:
        raise ValueError(f"interval must be a pair [a, b], got {iv!r}")
    a, b = (float(v) for v in iv)
    if not a < b:
        raise ValueError(f"interval [{a}, {b}] is empty")
    return a, b


def _canonical(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
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


# ---------------------------------------------------------------------- output


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _report(command: dict, digest: str, seed: int, results, exit_code: int, timings: dict | None) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tool": "bifval",
        "version": __version__,
        "command": command,
        "input_digest": digest,
        "seed": seed,
        "exit_code": exit_code,
        "results": results,
    }
    if timings is not None:
        doc["timings"] = timings
    return json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n"


# -------------------------------------------------------------------- commands


def cmd_scan(
    kind: str,
    problem: ProblemFile,
    out: str | os.PathLike,
    seed: int | None = None,
    radii: int | None = None,
    dirs: int | None = None,
    timings: bool = False,
) -> int:
    """Run one sweep and write ``report.json`` plus witness CSVs to ``out``."""
    if kind not in ("kinf", "gs", "szero"):
        raise ValueError(f"unknown scan kind {kind!r}")
    out = Path(out)
    cfg = problem.sweep_config(seed, radii, dirs)
    t0 = time.perf_counter()
    if kind == "kinf":
        report = scan_k_infinity(problem.f_expr, cfg)
        results = report.to_dict()
        code = EXIT_FINDINGS if report.candidates else EXIT_CLEAN
    elif kind == "szero":
        p = problem.pair()
        report = scan_s_zero(p.f, p.g, cfg)
        results = report.to_dict()
        code = EXIT_FINDINGS if report.candidates else EXIT_CLEAN
    else:
        p = problem.pair()
        verdict = check_gS(p.f, p.g, problem.S, problem.U, problem.R, cfg)
        report = verdict.report
        results = verdict.to_dict()
        code = EXIT_CLEAN if verdict.passed else EXIT_FINDINGS
    elapsed = time.perf_counter() - t0
    for ci, cand in enumerate(report.candidates):
        for wi, w in enumerate(cand.witnesses):
            write_atomic(out / "witnesses" / f"candidate{ci}_witness{wi}.csv", w.to_csv())
    command = {
        "name": "scan",
        "kind": kind,
        "problem": Path(problem.source).name,
        "seed": cfg.seed,
        "radii": cfg.K,
        "dirs": cfg.directions,
    }
    text = _report(command, problem.digest, cfg.seed, results, code, {"scan_seconds": elapsed} if timings else None)
    write_atomic(out / "report.json", text)
    return code


def _parse_points(text: str, n: int) -> np.ndarray:
    rows = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(v) for v in chunk.split(",")]
        if len(vals) != n:
            raise ValueError(f"start {chunk!r} has {len(vals)} coordinates, expected {n}")
        rows.append(vals)
    if not rows:
        raise ValueError("no start points given")
    return np.array(rows, dtype=float)


def _starts_from_problem(problem: ProblemFile, mode: str, seed: int, count: int | None) -> np.ndarray:
    tcfg = problem.transport
    if "starts" in tcfg and count is None:
        X = np.asarray(tcfg["starts"], dtype=float)
        if X.ndim != 2 or X.shape[1] != problem.n:
            raise ProblemFileError(f"{problem.source}: transport.starts must be a list of {problem.n}-vectors")
        return X
    sampler = dict(tcfg.get("sampler", {}))
    count = count if count is not None else int(sampler.get("count", 10))
    rmin, rmax = float(sampler.get("rmin", 5.0)), float(sampler.get("rmax", 50.0))
    if mode == "manifold":
        return flow.sample_manifold_points(problem.pair().g, count, rmin, rmax, seed=seed)
    mu = _interval(sampler.get("mu_range", [-1.0, 1.0]))
    return flow.sample_fiber_points(problem.f_expr, count, rmin, rmax, mu, seed=seed)


def cmd_transport(
    problem: ProblemFile,
    out: str | os.PathLike,
    lam: float | None = None,
    mode: str | None = None,
    starts: np.ndarray | None = None,
    seed: int = 0,
    count: int | None = None,
    tol: float | None = None,
    trajectories: bool = False,
    timings: bool = False,
) -> int:
    """Transport each start to the fiber f = lam and write per-start results.

    Per-start failures are findings recorded in the report; the exit code is
    1 only when the command itself cannot run.
    """
    out = Path(out)
    tcfg = problem.transport
    mode = mode or tcfg.get("mode", "ambient")
    if mode not in ("ambient", "manifold"):
        raise ValueError(f"unknown transport mode {mode!r}")
    lam = float(lam if lam is not None else tcfg.get("lambda", 0.0))
    tol = float(tol if tol is not None else problem.tolerances.get("tol", 1e-8))
    ctl = None
    if {"rtol", "atol", "max_steps"} & set(problem.tolerances):
        base = flow._controls_for(tol, None)
        ctl = dataclasses.replace(
            base,
            rtol=float(problem.tolerances.get("rtol", base.rtol)),
            atol=float(problem.tolerances.get("atol", base.atol)),
            max_steps=int(problem.tolerances.get("max_steps", base.max_steps)),
        )
    p = problem.pair()
    X = starts if starts is not None else _starts_from_problem(problem, mode, seed, count)
    t0 = time.perf_counter()
    records = []
    n_ok = 0
    for k, x in enumerate(X):
        entry: dict = {"index": k, "start": x}
        try:
            if mode == "manifold":
                x = flow.project_to_manifold(p.g, x)
                res = flow.transport_on_manifold(p, x, lam, tol, ctl)
            else:
                res = flow.transport_ambient(p, x, lam, problem.R, tol, ctl)
        except geo.OffManifoldError as exc:
            entry.update(success=False, termination="rejected_off_manifold", message=str(exc))
            records.append(entry)
            continue
        except geo.GeometryError as exc:
            entry.update(success=False, termination="degenerate_field", message=str(exc))
            records.append(entry)
            continue
        entry.update(res.to_dict())
        entry["success"] = res.success
        n_ok += int(res.success)
        records.append(entry)
        if trajectories:
            write_atomic(out / "trajectories" / f"start{k}.csv", res.trajectory.to_csv())
    elapsed = time.perf_counter() - t0
    terminations: dict[str, int] = {}
    for r in records:
        cause = r.get("termination") or r.get("trajectory", {}).get("termination", "unknown")
        terminations[cause] = terminations.get(cause, 0) + 1
    summary = {
        "starts": len(records),
        "success_rate": n_ok / len(records) if records else float("nan"),
        "max_f_error": max((r["f_error"] for r in records if r.get("f_error") is not None), default=float("nan")),
        "terminations": dict(sorted(terminations.items())),
    }
    if mode == "manifold":
        summary["max_norm_drift"] = max(
            (r["norm_drift"] for r in records if r.get("norm_drift") is not None), default=float("nan")
        )
    command = {
        "name": "transport",
        "problem": Path(problem.source).name,
        "mode": mode,
        "lambda": lam,
        "tol": tol,
        "seed": seed,
        "count": len(records),
    }
    results = {"summary": summary, "transports": records}
    text = _report(command, problem.digest, seed, results, EXIT_CLEAN, {"transport_seconds": elapsed} if timings else None)
    write_atomic(out / "report.json", text)
    return EXIT_CLEAN


def cmd_examples(which: str, out: str | os.PathLike, seed: int = 0, timings: bool = False, stream=None) -> int:
    """Run built-in worked examples and write a pass/fail matrix.

    Any failed expectation makes the exit code 1 and prints the expected and
    observed values of the failing rows to ``stream`` (stderr by default).
    """
    stream = stream if stream is not None else sys.stderr
    names = list(corpus.EXAMPLES) if which == "all" else [which]
    for name in names:
        if name not in corpus.EXAMPLES:
            raise ValueError(f"unknown example {name!r}")
    results = []
    elapsed = {}
    for name in names:
        t0 = time.perf_counter()
        results.append(corpus.run_example(name, seed))
        elapsed[name] = time.perf_counter() - t0
    failing = [c for r in results for c in r.checks if not c.passed]
    code = EXIT_ERROR if failing else EXIT_CLEAN
    matrix = [{"example": c.example, "check": c.name, "pass": c.passed} for r in results for c in r.checks]
    payload = {
        "all_pass": not failing,
        "matrix": matrix,
        "examples": [r.to_dict() for r in results],
    }
    digest = "sha256:" + hashlib.sha256(_canonical({"examples": names, "problems": corpus.PROBLEMS}).encode()).hexdigest()
    command = {"name": "examples", "which": which, "seed": seed}
    write_atomic(Path(out) / "report.json", _report(command, digest, seed, payload, code, elapsed if timings else None))
    for c in failing:
        print(f"FAIL {c.example}: {c.name}\n  expected: {c.expected}\n  observed: {c.to_dict()['observed']}", file=stream)
    return code


# ------------------------------------------------------------------------ main


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bifval", description="Candidate bifurcation values and fiber transport.")
    parser.add_argument("--version", action="version", version=f"bifval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, problem_required=True):
        if problem_required:
            sp.add_argument("--problem", required=True, help="TOML problem file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="64-bit seed (default 0)")
        sp.add_argument("--timings", action="store_true", help="include wall-clock timings in the report")

    sp = sub.add_parser("scan", help="sweep spheres for candidate values")
    sp.add_argument("kind", choices=["kinf", "gs", "szero"])
    common(sp)
    sp.add_argument("--radii", type=int, default=None, help="index K of the largest radius r0*q^K")
    sp.add_argument("--dirs", type=int, default=None, help="directions per sphere")

    sp = sub.add_parser("transport", help="move points between fibers")
    common(sp)
    sp.add_argument("--lambda", dest="lam", type=float, default=None, help="target fiber value")
    sp.add_argument("--mode", choices=["ambient", "manifold"], default=None)
    sp.add_argument("--starts", default=None, help="explicit starts 'x1,x2,...;x1,x2,...'")
    sp.add_argument("--count", type=int, default=None, help="number of sampled starts")
    sp.add_argument("--tol", type=float, default=None, help="fiber tolerance (default 1e-8)")
    sp.add_argument("--trajectories", action="store_true", help="also write one CSV per trajectory")

    sp = sub.add_parser("examples", help="reproduce the built-in worked examples")
    sp.add_argument("which", choices=[*corpus.EXAMPLES, "all"])
    common(sp, problem_required=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 means "findings" here
        return EXIT_CLEAN if exc.code in (0, None) else EXIT_ERROR
    seed = 0 if args.seed is None else args.seed
    if not 0 <= seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        if args.command == "examples":
            return cmd_examples(args.which, args.out, seed, args.timings)
        problem = ProblemFile.load(args.problem)
        if args.command == "scan":
            return cmd_scan(args.kind, problem, args.out, args.seed, args.radii, args.dirs, args.timings)
        starts = _parse_points(args.starts, problem.n) if args.starts else None
        return cmd_transport(
            problem, args.out, args.lam, args.mode, starts, seed, args.count, args.tol, args.trajectories, args.timings
        )
    except (ProblemFileError, ValueError, RuntimeError, geo.GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
