"""Scalar-field expressions over the chart variables ``u`` and ``v``.

Grammar (whitespace insensitive)::

    expr  := term (("+" | "-") term)*
    term  := unary (("*" | "/") unary)*
    unary := "-" unary | power
    power := atom ("^" unary)?          # right associative
    atom  := NUMBER | "u" | "v" | "pi" | FUNC "(" expr ")" | "(" expr ")"

Evaluation is vectorised over numpy arrays.  Domain violations are never
silently turned into geometry: the scalar path raises :class:`DomainError`,
the array path returns a boolean mask of offending entries.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import DomainError, ExprSyntaxError, UnknownIdentifier

VARIABLES = ("u", "v")
CONSTANTS = {"pi": math.pi}
FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "cosh": np.cosh,
    "sinh": np.sinh,
}


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Const, Neg, BinOp, Call]

# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)

_ATOM_START = frozenset({"number", "identifier", "'('", "'-'"})


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = list(self._tokenize(source))
        self.pos = 0

    def _offset(self, char_index):
        return len(self.source[:char_index].encode("utf-8"))

    def _tokenize(self, source):
        i = 0
        while i < len(source):
            m = _TOKEN_RE.match(source, i)
            if m is None:
                raise ExprSyntaxError(
                    f"unexpected character {source[i]!r}", self._offset(i), _ATOM_START
                )
            kind = m.lastgroup
            if kind != "ws":
                text = m.group()
                yield (text if kind == "op" else kind, text, self._offset(i))
            i = m.end()
        yield ("eof", "", self._offset(len(source)))

    @property
    def tok(self):
        return self.tokens[self.pos]

    def advance(self):
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def fail(self, expected):
        kind, text, off = self.tok
        what = "end of input" if kind == "eof" else f"token {text!r}"
        raise ExprSyntaxError(f"unexpected {what}", off, expected)

    def parse(self) -> Node:
        node = self.expr()
        if self.tok[0] != "eof":
            self.fail({"'+'", "'-'", "'*'", "'/'", "'^'", "end of input"})
        return node

    def expr(self):
        node = self.term()
        while self.tok[0] in ("+", "-"):
            op = self.advance()[0]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.tok[0] in ("*", "/"):
            op = self.advance()[0]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.tok[0] == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok[0] == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, text, off = self.tok
        if kind == "num":
            self.advance()
            return Num(float(text))
        if kind == "(":
            self.advance()
            node = self.expr()
            if self.tok[0] != ")":
                self.fail({"')'"})
            self.advance()
            return node
        if kind == "ident":
            self.advance()
            if text in FUNCTIONS:
                if self.tok[0] != "(":
                    self.fail({"'('"})
                self.advance()
                arg = self.expr()
                if self.tok[0] != ")":
                    self.fail({"')'"})
                self.advance()
                return Call(text, arg)
            if text in VARIABLES:
                return Var(text)
            if text in CONSTANTS:
                return Const(text)
            raise UnknownIdentifier(text, off)
        self.fail(_ATOM_START)


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 5


def to_source(node: Node) -> str:
    """Render an AST with the minimum parentheses that parse back to it."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, (Var, Const)):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        return f"-({inner})" if _prec(node.operand) < 3 else f"-{inner}"

    def wrap(child, need):
        s = to_source(child)
        return f"({s})" if need else s

    p = _PREC[node.op]
    if node.op == "^":
        left = wrap(node.left, _prec(node.left) <= 4)
        right = wrap(node.right, _prec(node.right) < 3)
        return f"{left}^{right}"
    left = wrap(node.left, _prec(node.left) < p)
    right = wrap(node.right, _prec(node.right) <= p)
    return f"{left} {node.op} {right}"


# ---------------------------------------------------------------------------
# compilation to numpy closures

def _compile(node: Node) -> Callable:
    # Each closure takes (u, v, bad) where ``bad`` is a list collecting
    # boolean masks of domain violations.
    if isinstance(node, Num):
        value = node.value
        return lambda u, v, bad: value
    if isinstance(node, Const):
        value = CONSTANTS[node.name]
        return lambda u, v, bad: value
    if isinstance(node, Var):
        if node.name == "u":
            return lambda u, v, bad: u
        return lambda u, v, bad: v
    if isinstance(node, Neg):
        inner = _compile(node.operand)
        return lambda u, v, bad: -inner(u, v, bad)
    if isinstance(node, Call):
        arg = _compile(node.arg)
        fn = FUNCTIONS[node.func]
        if node.func == "log":
            def call(u, v, bad):
                x = arg(u, v, bad)
                bad.append(np.asarray(x) <= 0)
                return fn(x)
            return call
        if node.func == "sqrt":
            def call(u, v, bad):
                x = arg(u, v, bad)
                bad.append(np.asarray(x) < 0)
                return fn(x)
            return call
        return lambda u, v, bad: fn(arg(u, v, bad))

    left, right = _compile(node.left), _compile(node.right)
    if node.op == "+":
        return lambda u, v, bad: left(u, v, bad) + right(u, v, bad)
    if node.op == "-":
        return lambda u, v, bad: left(u, v, bad) - right(u, v, bad)
    if node.op == "*":
        return lambda u, v, bad: left(u, v, bad) * right(u, v, bad)
    if node.op == "/":
        def div(u, v, bad):
            a, b = left(u, v, bad), right(u, v, bad)
            bad.append(np.asarray(b) == 0)
            return np.divide(a, b)
        return div

    def power(u, v, bad):
        a, b = left(u, v, bad), right(u, v, bad)
        a_arr, b_arr = np.asarray(a), np.asarray(b)
        bad.append((a_arr < 0) & (b_arr != np.round(b_arr)))
        bad.append((a_arr == 0) & (b_arr < 0))
        return np.power(np.asarray(a, dtype=float), b)
    return power


def _variables(node: Node) -> frozenset:
    if isinstance(node, Var):
        return frozenset({node.name})
    if isinstance(node, (Num, Const)):
        return frozenset()
    if isinstance(node, Neg):
        return _variables(node.operand)
    if isinstance(node, Call):
        return _variables(node.arg)
    return _variables(node.left) | _variables(node.right)


class ScalarFieldExpr:
    """A parsed, immutable scalar field h(u, v)."""

    __slots__ = ("ast", "_fn", "variables")

    def __init__(self, ast: Node):
        self.ast = ast
        self._fn = _compile(ast)
        self.variables = _variables(ast)

    @property
    def is_constant(self) -> bool:
        return not self.variables

    @property
    def is_zero(self) -> bool:
        return isinstance(self.ast, Num) and self.ast.value == 0.0

    def __eq__(self, other):
        return isinstance(other, ScalarFieldExpr) and self.ast == other.ast

    def __hash__(self):
        return hash(self.ast)

    def __repr__(self):
        return f"ScalarFieldExpr({to_source(self.ast)!r})"

    def __str__(self):
        return to_source(self.ast)

    def evaluate_array(self, u, v):
        """Vectorised evaluation; returns ``(values, bad_mask)``."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        shape = np.broadcast_shapes(u.shape, v.shape)
        bad = []
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self._fn(u, v, bad), dtype=float), shape)
            mask = ~np.isfinite(out)
            for m in bad:
                mask = mask | np.broadcast_to(m, shape)
        return np.array(out), mask

    def __call__(self, coords):
        return evaluate(self, coords)


def parse(source: str) -> ScalarFieldExpr:
    return ScalarFieldExpr(_Parser(source).parse())


def evaluate(expr: ScalarFieldExpr, coords) -> float:
    """Evaluate at a single point ``(u, v)``; raises DomainError on NaN/Inf
    or an out-of-domain sub-expression."""
    if len(coords) != 2:
        raise ValueError(f"expected 2 coordinates, got {len(coords)}")
    value, bad = expr.evaluate_array(float(coords[0]), float(coords[1]))
    if bool(bad):
        raise DomainError(f"{expr} is undefined at {tuple(coords)}")
    return float(value)


def as_expr(value) -> ScalarFieldExpr:
    if isinstance(value, ScalarFieldExpr):
        return value
    if isinstance(value, (int, float)):
        return ScalarFieldExpr(Num(float(value)))
    return parse(value)


ZERO = ScalarFieldExpr(Num(0.0))
