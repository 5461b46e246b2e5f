"""A small arithmetic language for defining phi maps from text.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := number | var | func '(' expr (',' expr)? ')' | '(' expr ')'

Variables are ``t1``, ``t2``, ...  Domains come from guards collected on the
tree: divisors must be nonzero, ``sqrt`` arguments nonnegative, ``log``
arguments positive and powers real-valued; ``abs`` marks its kink as
boundary.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, UniformDeltaError
from .funcspace import BOUNDARY_BAND, PhiMap, Region


class ExprSyntaxError(UniformDeltaError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownFunction(ExprSyntaxError):
    pass


class ArityError(ExprSyntaxError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


Expr = Union[Num, Var, Neg, BinOp, Call]

FUNCTIONS = {
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sign": (1, np.sign),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_VAR = re.compile(r"t([1-9]\d*)$")


def _tokenize(src: str):
    raw = src.encode("utf-8")
    pos = 0
    tokens = []
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.lastgroup is None:
            start = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {src[start]!r}", len(src[:start].encode()))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), len(src[:start].encode())))
        pos = m.end()
    tokens.append(("end", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.tokens = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, val, off = self.tok
        if kind != "op" or val != text:
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {text!r}, found {found}", off)
        self.i += 1

    def at_op(self, *ops) -> bool:
        return self.tok[0] == "op" and self.tok[1] in ops

    def expr(self) -> Expr:
        node = self.term()
        while self.at_op("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.at_op("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.at_op("-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at_op("^"):
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            var = _VAR.match(val)
            if var:
                return Var(int(var.group(1)))
            if val not in FUNCTIONS:
                raise UnknownFunction(f"unknown function {val!r}", off)
            self.expect("(")
            args = [self.expr()]
            while self.at_op(","):
                self.take()
                args.append(self.expr())
            close_off = self.tok[2]
            self.expect(")")
            arity = FUNCTIONS[val][0]
            if len(args) != arity:
                raise ArityError(f"{val} takes {arity} argument(s), got {len(args)}", close_off)
            return Call(val, tuple(args))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", off)


def parse(src: str) -> Expr:
    if not src or not src.strip():
        raise ExprSyntaxError("empty expression", 0)
    p = _Parser(src)
    node = p.expr()
    kind, val, off = p.tok
    if kind != "end":
        raise ExprSyntaxError(f"unexpected {val!r}", off)
    return node


def to_text(node: Expr) -> str:
    """Print with enough parentheses that ``parse(to_text(e)) == e``."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return f"t{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_text(node.left)}{node.op}{to_text(node.right)})"
    return f"{node.name}({', '.join(to_text(a) for a in node.args)})"


def variables(node: Expr) -> set:
    if isinstance(node, Var):
        return {node.index}
    if isinstance(node, Neg):
        return variables(node.arg)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Call):
        return set().union(*(variables(a) for a in node.args))
    return set()


def _eval(node: Expr, t: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Evaluate on rows of t, raising ``region`` codes in place where guards trip."""
    n = t.shape[0]
    if isinstance(node, Num):
        return np.full(n, node.value)
    if isinstance(node, Var):
        return t[:, node.index - 1]
    if isinstance(node, Neg):
        return -_eval(node.arg, t, region)
    if isinstance(node, BinOp):
        a = _eval(node.left, t, region)
        b = _eval(node.right, t, region)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            _guard(region, b == 0, np.abs(b) < BOUNDARY_BAND)
            return a / b
        integral = b == np.round(b)
        _guard(region, ((a < 0) & ~integral) | ((a == 0) & (b < 0)), (np.abs(a) < BOUNDARY_BAND) & (b < 0))
        return _pow(a, b, node.right)
    args = [_eval(a, t, region) for a in node.args]
    if node.name == "sqrt":
        _guard(region, args[0] < 0, args[0] == 0)
    elif node.name == "abs":
        # the kink is evaluable but not differentiable
        _guard(region, np.zeros_like(args[0], dtype=bool), np.abs(args[0]) < BOUNDARY_BAND)
    elif node.name == "log":
        _guard(region, args[0] <= 0, args[0] < BOUNDARY_BAND)
    return FUNCTIONS[node.name][1](*args)


def _pow(a: np.ndarray, b: np.ndarray, exponent_node) -> np.ndarray:
    # a literal exponent goes through numpy's scalar fast paths (x**2 is x*x)
    if isinstance(exponent_node, Num):
        return a ** exponent_node.value
    return np.power(a, b)


def _guard(region: np.ndarray, outside: np.ndarray, boundary: np.ndarray) -> None:
    np.maximum(region, np.where(boundary, Region.BOUNDARY, Region.INSIDE), out=region)
    np.maximum(region, np.where(outside, Region.OUTSIDE, Region.INSIDE), out=region)


def _grad(node: Expr, t: np.ndarray):
    """Forward-mode pass returning (value, gradient) with gradient shape (N, d)."""
    n, d = t.shape
    if isinstance(node, Num):
        return np.full(n, node.value), np.zeros((n, d))
    if isinstance(node, Var):
        g = np.zeros((n, d))
        g[:, node.index - 1] = 1.0
        return t[:, node.index - 1], g
    if isinstance(node, Neg):
        v, g = _grad(node.arg, t)
        return -v, -g
    if isinstance(node, BinOp):
        a, da = _grad(node.left, t)
        b, db = _grad(node.right, t)
        if node.op == "+":
            return a + b, da + db
        if node.op == "-":
            return a - b, da - db
        if node.op == "*":
            return a * b, da * b[:, None] + a[:, None] * db
        if node.op == "/":
            return a / b, (da * b[:, None] - a[:, None] * db) / (b**2)[:, None]
        v = _pow(a, b, node.right)
        g = (b * _pow(a, b - 1, Num(node.right.value - 1) if isinstance(node.right, Num) else None))[:, None] * da
        if variables(node.right):
            g = g + (v * np.log(a))[:, None] * db
        return v, g
    vals = [_grad(a, t) for a in node.args]
    (a, da) = vals[0]
    if node.name == "sqrt":
        v = np.sqrt(a)
        return v, (0.5 / v)[:, None] * da
    if node.name == "abs":
        return np.abs(a), np.sign(a)[:, None] * da
    if node.name == "exp":
        v = np.exp(a)
        return v, v[:, None] * da
    if node.name == "log":
        return np.log(a), da / a[:, None]
    if node.name == "sign":
        return np.sign(a), np.zeros_like(da)
    b, db = vals[1]
    # ties resolve to the first argument
    pick = (a <= b) if node.name == "min" else (a >= b)
    return np.where(pick, a, b), np.where(pick[:, None], da, db)


def gradient(node: Expr, t) -> np.ndarray:
    """Gradient of a scalar expression at each row of t (subgradient conventions at kinks)."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    with np.errstate(all="ignore"):
        return _grad(node, t)[1]


def evaluate(node: Expr, t) -> np.ndarray:
    t = np.atleast_2d(np.asarray(t, dtype=float))
    region = np.zeros(t.shape[0], dtype=int)
    with np.errstate(all="ignore"):
        return _eval(node, t, region)


@dataclass(frozen=True)
class VectorExprPhi:
    sources: tuple
    components: tuple
    d_in: int

    def func(self, t: np.ndarray) -> np.ndarray:
        return np.stack([evaluate(c, t) for c in self.components], axis=1)

    def region(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_2d(np.asarray(t, dtype=float))
        region = np.zeros(t.shape[0], dtype=int)
        with np.errstate(all="ignore"):
            vals = np.stack([_eval(c, t, region) for c in self.components], axis=1)
        bad = ~np.all(np.isfinite(vals), axis=1)
        region[bad] = Region.OUTSIDE
        return region

    def jacobian(self, t: np.ndarray) -> np.ndarray:
        t = np.atleast_2d(np.asarray(t, dtype=float))
        return np.stack([gradient(c, t)[:, : self.d_in] for c in self.components], axis=1)

    def to_phi(self) -> PhiMap:
        name = "expr:" + ";".join(self.sources)
        return PhiMap(name, self.d_in, len(self.components), func=self.func, region=self.region,
                      jacobian_analytic=self.jacobian)


def compile_phi(components: Sequence[str]) -> PhiMap:
    if isinstance(components, str):
        components = [components]
    if not components:
        raise DimensionError("need at least one component")
    trees = tuple(parse(src) for src in components)
    used = set().union(*(variables(e) for e in trees))
    d_in = max(used) if used else 1
    missing = sorted(set(range(1, d_in + 1)) - used)
    if used and missing:
        raise DimensionError(f"variable indices must be contiguous from t1; missing {', '.join(f't{i}' for i in missing)}")
    return VectorExprPhi(tuple(components), trees, d_in).to_phi()
