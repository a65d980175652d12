"""Closed-form scalar expressions over R^n with exact forward-mode derivatives.

Formulas are parsed into an immutable tree. Evaluation goes through Python
source generated once per expression: a scalar backend (plain floats, used by
the flow integrator) and a batched numpy backend (used by the sphere sweeps),
each producing the value, the gradient and optionally the Hessian by
propagating first- and second-order jets through the tree.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np

__all__ = [
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Pow",
    "Expression",
    "ExprSyntaxError",
    "ExprDomainError",
    "DimensionError",
    "parse",
    "evaluate",
    "grad",
    "jacobian2",
]

UNARY_OPS = ("neg", "exp", "log", "sin", "cos", "sqrt")
BINARY_OPS = ("add", "sub", "mul", "div")


class ExprSyntaxError(ValueError):
    """Malformed formula text; ``position`` is a 0-based character offset."""

    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        where = f" at position {position}"
        if text:
            where += f"\n  {text}\n  {' ' * position}^"
        super().__init__(message + where)


class ExprDomainError(ArithmeticError):
    """Evaluation hit a guard (log/sqrt of a non-positive, division by zero,
    fractional power of a non-positive base)."""

    def __init__(self, message: str, node: "Node | None" = None):
        self.node = node
        if node is not None:
            message = f"{message} in `{to_text(node)}`"
        super().__init__(message)


class DimensionError(ValueError):
    pass


# --------------------------------------------------------------------------- nodes


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: float


Node = Union[Const, Var, Unary, Binary, Pow]


# ------------------------------------------------------------------------- printer

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}
_SYM = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def _num(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def to_text(node: Node, names: tuple[str, ...] | None = None) -> str:
    """Render a node in the input grammar; parsing the result gives the same tree."""

    def name(i: int) -> str:
        return names[i] if names is not None else f"x{i + 1}"

    def atom_like(n: Node) -> str:
        s = go(n)
        if isinstance(n, (Binary, Pow)) or (isinstance(n, Unary) and n.op == "neg"):
            return f"({s})"
        return s

    def go(n: Node) -> str:
        if isinstance(n, Const):
            return _num(n.value) if n.value >= 0 else f"(-{_num(-n.value)})"
        if isinstance(n, Var):
            return name(n.index)
        if isinstance(n, Unary):
            if n.op == "neg":
                inner = go(n.arg)
                if isinstance(n.arg, (Binary, Unary)) and (
                    isinstance(n.arg, Binary) or n.arg.op == "neg"
                ):
                    inner = f"({inner})"
                return f"-{inner}"
            return f"{n.op}({go(n.arg)})"
        if isinstance(n, Pow):
            e = _num(n.exponent) if n.exponent >= 0 else f"(-{_num(-n.exponent)})"
            return f"{atom_like(n.base)}^{e}"
        p = _PREC[n.op]

        def side(child: Node, right: bool) -> str:
            s = go(child)
            if isinstance(child, Binary):
                cp = _PREC[child.op]
                if cp < p or (right and cp == p):
                    return f"({s})"
            elif isinstance(child, Unary) and child.op == "neg":
                return f"({s})"
            return s

        return f"{side(n.left, False)} {_SYM[n.op]} {side(n.right, True)}"

    return go(node)


# -------------------------------------------------------------------------- parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad, text)
        kind = m.lastgroup
        start = m.start(kind)
        value = m.group(kind)
        if value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens = _tokenize(text)
        self.i = 0
        self.aliases = {"x": 0, "y": 1, "z": 2} if n <= 3 else {}

    @property
    def tok(self):
        return self.tokens[self.i]

    def error(self, message: str, pos: int | None = None):
        raise ExprSyntaxError(message, self.tok[2] if pos is None else pos, self.text)

    def accept(self, op: str) -> bool:
        if self.tok[0] == "op" and self.tok[1] == op:
            self.i += 1
            return True
        return False

    def expect(self, op: str):
        if not self.accept(op):
            got = self.tok[1] or "end of input"
            self.error(f"expected {op!r}, got {got!r}")

    def parse(self) -> Node:
        node = self.expr()
        if self.tok[0] != "end":
            self.error(f"unexpected token {self.tok[1]!r}")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok[0] == "op" and self.tok[1] in "+-":
            op = "add" if self.tok[1] == "+" else "sub"
            self.i += 1
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok[0] == "op" and self.tok[1] in "*/":
            op = "mul" if self.tok[1] == "*" else "div"
            self.i += 1
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.accept("-"):
            return Unary("neg", self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            pos = self.tok[2]
            self.i += 1
            exponent_node = self.unary()  # right-associative through unary -> power
            if _has_var(exponent_node):
                self.error("exponent must be constant (use exp(a*log(b)))", pos)
            return Pow(base, _const_value(exponent_node))
        return base

    def atom(self) -> Node:
        kind, value, pos = self.tok
        if kind == "num":
            self.i += 1
            return Const(float(value))
        if kind == "id":
            self.i += 1
            if value in UNARY_OPS and value != "neg":
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(value, arg)
            return Var(self.variable(value, pos))
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        self.error(f"unexpected {'end of input' if kind == 'end' else repr(value)}")

    def variable(self, name: str, pos: int) -> int:
        if name in self.aliases:
            idx = self.aliases[name]
        else:
            m = re.fullmatch(r"x([1-9]\d*)", name)
            if m is None:
                self.error(f"unknown identifier {name!r}", pos)
            idx = int(m.group(1)) - 1
        if idx >= self.n:
            self.error(f"variable {name!r} exceeds dimension n={self.n}", pos)
        return idx


def _has_var(node: Node) -> bool:
    if isinstance(node, Var):
        return True
    if isinstance(node, Const):
        return False
    if isinstance(node, Unary):
        return _has_var(node.arg)
    if isinstance(node, Pow):
        return _has_var(node.base)
    return _has_var(node.left) or _has_var(node.right)


def _const_value(node: Node) -> float:
    return float(Expression(node, 1).evaluate(np.zeros(1)))


# ------------------------------------------------------------------------- codegen


def _walk(node: Node, out: list[Node]) -> None:
    if isinstance(node, Unary):
        _walk(node.arg, out)
    elif isinstance(node, Pow):
        _walk(node.base, out)
    elif isinstance(node, Binary):
        _walk(node.left, out)
        _walk(node.right, out)
    out.append(node)


class _Gen:
    """Emit straight-line code propagating (value, gradient, Hessian) jets.

    Zero derivative entries are tracked symbolically as ``None`` so constant
    and single-variable subtrees cost nothing extra.
    """

    def __init__(self, nodes: list[Node], n: int, order: int, batch: bool):
        self.nodes = nodes
        self.index = {id(nd): k for k, nd in enumerate(nodes)}
        self.n = n
        self.order = order
        self.batch = batch
        self.lines: list[str] = []
        self.tmp = 0

    def fresh(self, expr: str) -> str:
        name = f"t{self.tmp}"
        self.tmp += 1
        self.lines.append(f"    {name} = {expr}")
        return name

    @staticmethod
    def add(a: str | None, b: str | None, sign: str = "+") -> str | None:
        if a is None and b is None:
            return None
        if b is None:
            return a
        if a is None:
            return f"(-{b})" if sign == "-" else b
        return f"({a} {sign} {b})"

    @staticmethod
    def mul(a: str | None, b: str | None) -> str | None:
        if a is None or b is None:
            return None
        return f"({a} * {b})"

    def emit_jet(self, v: str, g, h):
        g = [None if e is None else self.fresh(e) for e in g] if g is not None else None
        if h is not None:
            h = {k: (None if e is None else self.fresh(e)) for k, e in h.items()}
        return v, g, h

    def chain(self, a, d1: str, d2: str | None):
        """Jets of phi(a) given names of phi'(a) and phi''(a)."""
        _, ga, ha = a
        g = [self.mul(d1, gi) for gi in ga]
        h = None
        if self.order >= 2:
            h = {}
            for (i, j), hij in ha.items():
                h[i, j] = self.add(self.mul(d2, self.mul(ga[i], ga[j])), self.mul(d1, hij))
        return g, h

    def ipow(self, b: str, k: int) -> str:
        """b**k for integer k >= 1 by repeated multiplication (binary powering)."""
        result = None
        base = b
        while True:
            if k & 1:
                result = base if result is None else self.fresh(f"{result} * {base}")
            k >>= 1
            if not k:
                return result
            base = self.fresh(f"{base} * {base}")

    def build(self):
        n = self.n
        pairs = [(i, j) for i in range(n) for j in range(i, n)]
        jets = {}
        for k, nd in enumerate(self.nodes):
            if isinstance(nd, Const):
                v = self.fresh(repr(nd.value))
                jets[k] = (v, [None] * n, {p: None for p in pairs} if self.order >= 2 else None)
                continue
            if isinstance(nd, Var):
                v = f"x{nd.index}"
                g = ["1.0" if i == nd.index else None for i in range(n)]
                jets[k] = (v, g, {p: None for p in pairs} if self.order >= 2 else None)
                continue
            if isinstance(nd, Unary):
                a = jets[self.index[id(nd.arg)]]
                va = a[0]
                op = nd.op
                if op == "neg":
                    v = self.fresh(f"-{va}")
                    g = [None if e is None else f"(-{e})" for e in a[1]]
                    h = (
                        {p: (None if e is None else f"(-{e})") for p, e in a[2].items()}
                        if self.order >= 2
                        else None
                    )
                    jets[k] = self.emit_jet(v, g, h)
                    continue
                if op == "exp":
                    v = self.fresh(f"_exp({va})")
                    d1, d2 = v, v
                elif op == "log":
                    v = self.fresh(f"_log({va}, {k})")
                    d1 = self.fresh(f"1.0 / {va}")
                    d2 = self.fresh(f"-({d1} * {d1})") if self.order >= 2 else None
                elif op == "sin":
                    v = self.fresh(f"_sin({va})")
                    d1 = self.fresh(f"_cos({va})")
                    d2 = self.fresh(f"-{v}") if self.order >= 2 else None
                elif op == "cos":
                    v = self.fresh(f"_cos({va})")
                    d1 = self.fresh(f"-_sin({va})")
                    d2 = self.fresh(f"-{v}") if self.order >= 2 else None
                elif op == "sqrt":
                    v = self.fresh(f"_sqrt({va}, {k})")
                    d1 = self.fresh(f"0.5 / {v}")
                    d2 = self.fresh(f"-0.25 / ({v} * {va})") if self.order >= 2 else None
                else:  # pragma: no cover
                    raise ValueError(op)
                g, h = self.chain(a, d1, d2)
                jets[k] = self.emit_jet(v, g, h)
                continue
            if isinstance(nd, Pow):
                a = jets[self.index[id(nd.base)]]
                va = a[0]
                p = nd.exponent
                if p == 0.0:
                    v = self.fresh("1.0")
                    jets[k] = (v, [None] * n, {q: None for q in pairs} if self.order >= 2 else None)
                    continue
                if p.is_integer() and abs(p) <= 1024:
                    kk = int(p)
                    if kk > 0:
                        v = self.ipow(va, kk)
                        d1 = (
                            "1.0"
                            if kk == 1
                            else self.fresh(f"{kk}.0 * {self.ipow(va, kk - 1)}")
                        )
                        d2 = None
                        if self.order >= 2 and kk >= 2:
                            d2 = (
                                "2.0"
                                if kk == 2
                                else self.fresh(f"{kk * (kk - 1)}.0 * {self.ipow(va, kk - 2)}")
                            )
                    else:
                        m = -kk
                        inv = self.fresh(f"1.0 / _nz({va}, {k})")
                        v = self.ipow(inv, m)
                        d1 = self.fresh(f"{kk}.0 * {v} * {inv}")
                        d2 = (
                            self.fresh(f"{kk * (kk - 1)}.0 * {v} * {inv} * {inv}")
                            if self.order >= 2
                            else None
                        )
                else:
                    v = self.fresh(f"_fpow({va}, {p!r}, {k})")
                    d1 = self.fresh(f"{p!r} * _fpow({va}, {p - 1!r}, {k})")
                    d2 = (
                        self.fresh(f"{p * (p - 1)!r} * _fpow({va}, {p - 2!r}, {k})")
                        if self.order >= 2
                        else None
                    )
                g, h = self.chain(a, d1, d2)
                jets[k] = self.emit_jet(v, g, h)
                continue
            # binary
            a = jets[self.index[id(nd.left)]]
            b = jets[self.index[id(nd.right)]]
            (va, ga, ha), (vb, gb, hb) = a, b
            op = nd.op
            if op in ("add", "sub"):
                s = "+" if op == "add" else "-"
                v = self.fresh(f"{va} {s} {vb}")
                g = [self.add(x, y, s) for x, y in zip(ga, gb)]
                h = {q: self.add(ha[q], hb[q], s) for q in pairs} if self.order >= 2 else None
            elif op == "mul":
                v = self.fresh(f"{va} * {vb}")
                g = [self.add(self.mul(va, y), self.mul(x, vb)) for x, y in zip(ga, gb)]
                h = None
                if self.order >= 2:
                    h = {}
                    for i, j in pairs:
                        t = self.add(self.mul(va, hb[i, j]), self.mul(ha[i, j], vb))
                        t = self.add(t, self.mul(ga[i], gb[j]))
                        t = self.add(t, self.mul(ga[j], gb[i]))
                        h[i, j] = t
            else:  # div
                den = self.fresh(f"_nz({vb}, {k})")
                v = self.fresh(f"{va} / {den}")
                g = []
                for x, y in zip(ga, gb):
                    num = self.add(x, self.mul(v, y), "-")
                    g.append(None if num is None else f"({num} / {den})")
                g = [None if e is None else self.fresh(e) for e in g]
                h = None
                if self.order >= 2:
                    h = {}
                    for i, j in pairs:
                        num = self.add(ha[i, j], self.mul(g[i], gb[j]), "-")
                        num = self.add(num, self.mul(g[j], gb[i]), "-")
                        num = self.add(num, self.mul(v, hb[i, j]), "-")
                        h[i, j] = None if num is None else f"({num} / {den})"
                jets[k] = self.emit_jet(v, g, h)
                continue
            jets[k] = self.emit_jet(v, g, h)
        return jets[len(self.nodes) - 1]

    def source(self) -> str:
        v, g, h = self.build()
        if self.batch:
            head = ["def _jet(X):"] + [f"    x{i} = X[:, {i}]" for i in range(self.n)]
        else:
            head = ["def _jet(" + ", ".join(f"x{i}" for i in range(self.n)) + "):"]
        zero = "0.0"
        gs = ", ".join(e or zero for e in g)
        out = f"    return ({v}, ({gs},)"
        if self.order >= 2:
            hs = ", ".join(h[q] or zero for q in sorted(h))
            out += f", ({hs},)"
        out += ")"
        return "\n".join(head + self.lines + [out]) + "\n"


def _scalar_namespace(nodes: list[Node]) -> dict:
    def _log(v, k):
        if not v > 0.0:
            raise ExprDomainError(f"log of non-positive value {v!r}", nodes[k])
        return math.log(v)

    def _sqrt(v, k):
        if not v > 0.0:
            raise ExprDomainError(f"sqrt of non-positive value {v!r}", nodes[k])
        return math.sqrt(v)

    def _nz(v, k):
        if v == 0.0 or v != v:
            raise ExprDomainError("division by zero", nodes[k])
        return v

    def _fpow(v, p, k):
        if not v > 0.0:
            raise ExprDomainError(f"non-integer power of non-positive base {v!r}", nodes[k])
        return math.pow(v, p)

    def _exp(v):
        try:
            return math.exp(v)
        except OverflowError:
            return math.inf

    return {
        "_log": _log,
        "_sqrt": _sqrt,
        "_nz": _nz,
        "_fpow": _fpow,
        "_exp": _exp,
        "_sin": math.sin,
        "_cos": math.cos,
    }


def _batch_namespace() -> dict:
    nan = np.nan

    def _log(v, k):
        return np.log(np.where(v > 0.0, v, nan))

    def _sqrt(v, k):
        return np.sqrt(np.where(v > 0.0, v, nan))

    def _nz(v, k):
        return np.where(v != 0.0, v, nan)

    def _fpow(v, p, k):
        return np.power(np.where(v > 0.0, v, nan), p)

    return {
        "_log": _log,
        "_sqrt": _sqrt,
        "_nz": _nz,
        "_fpow": _fpow,
        "_exp": np.exp,
        "_sin": np.sin,
        "_cos": np.cos,
    }


def _compile(src: str, namespace: dict):
    code = compile(src, "<bifval-expr>", "exec")
    exec(code, namespace)
    return namespace["_jet"]


# ---------------------------------------------------------------------- Expression


@dataclass(frozen=True)
class Expression:
    """A parsed formula in ``n`` variables. Equality is structural."""

    root: Node
    n: int
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.n < 1:
            raise DimensionError("arity must be positive")
        bad = [nd.index for nd in self.nodes if isinstance(nd, Var) and nd.index >= self.n]
        if bad:
            raise DimensionError(f"variable x{bad[0] + 1} exceeds arity {self.n}")

    @cached_property
    def nodes(self) -> list[Node]:
        out: list[Node] = []
        _walk(self.root, out)
        return out

    def __str__(self) -> str:
        return self.to_text()

    def to_text(self, aliases: bool = False) -> str:
        names = ("x", "y", "z")[: self.n] if aliases and self.n <= 3 else None
        return to_text(self.root, names)

    def _fn(self, order: int, batch: bool):
        key = (order, batch)
        fn = self._cache.get(key)
        if fn is None:
            src = _Gen(self.nodes, self.n, order, batch).source()
            ns = _batch_namespace() if batch else _scalar_namespace(self.nodes)
            fn = _compile(src, ns)
            self._cache[key] = fn
        return fn

    def _check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"point has shape {x.shape}, expected ({self.n},)")
        return x

    # scalar, strict API

    def evaluate(self, x) -> float:
        x = self._check_point(x)
        return float(self._fn(1, False)(*x.tolist())[0])

    def value_and_grad(self, x) -> tuple[float, np.ndarray]:
        x = self._check_point(x)
        v, g = self._fn(1, False)(*x.tolist())
        return float(v), np.array(g, dtype=float)

    def gradient(self, x) -> np.ndarray:
        return self.value_and_grad(x)[1]

    def hessian(self, x) -> np.ndarray:
        x = self._check_point(x)
        _, _, h = self._fn(2, False)(*x.tolist())
        return _unpack_hessian(np.array(h, dtype=float)[None, :], self.n)[0]

    __call__ = evaluate

    # batched, lenient API: guard failures produce nan instead of raising

    def batch(self, X, order: int = 1):
        """Jets at the rows of ``X`` (shape (m, n)).

        Returns ``(values, grads)`` for order 1 and ``(values, grads, hessians)``
        for order 2, with shapes (m,), (m, n), (m, n, n).
        """
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n:
            raise DimensionError(f"batch has shape {X.shape}, expected (m, {self.n})")
        m = X.shape[0]
        with np.errstate(all="ignore"):
            res = self._fn(order, True)(X)
            v = np.empty(m)
            v[:] = res[0]
            g = np.empty((m, self.n))
            for i, e in enumerate(res[1]):
                g[:, i] = e
            if order < 2:
                return v, g
            h = np.empty((m, len(res[2])))
            for i, e in enumerate(res[2]):
                h[:, i] = e
        return v, g, _unpack_hessian(h, self.n)


def _unpack_hessian(packed: np.ndarray, n: int) -> np.ndarray:
    m = packed.shape[0]
    H = np.empty((m, n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            H[:, i, j] = packed[:, k]
            H[:, j, i] = packed[:, k]
            k += 1
    return H


# ----------------------------------------------------------------- module-level ops


def parse(text: str, n: int) -> Expression:
    """Parse an infix formula in ``x1..xn`` (or ``x, y, z`` when n <= 3)."""
    if n < 1:
        raise DimensionError("dimension must be positive")
    return Expression(_Parser(text, n).parse(), n)


def evaluate(e: Expression, x) -> float:
    return e.evaluate(x)


def grad(e: Expression, x) -> np.ndarray:
    return e.gradient(x)


def jacobian2(f1: Expression, f2: Expression, x) -> float:
    """Determinant of the Jacobian of (f1, f2): R^2 -> R^2 at ``x``."""
    if f1.n != 2 or f2.n != 2:
        raise DimensionError("jacobian2 needs two expressions of arity 2")
    a = f1.gradient(x)
    b = f2.gradient(x)
    return float(a[0] * b[1] - a[1] * b[0])
