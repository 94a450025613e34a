import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from myerskit.errors import DomainError, ExprSyntaxError, UnknownIdentifier
from myerskit.expr import (FUNCTIONS, BinOp, Call, Const, Neg, Num, Var, as_expr, evaluate, parse,
                           to_source)


# ---------------------------------------------------------------------------
# independent reference evaluator (scalar, straight recursive descent on text)

class RefEval:
    tok = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.))")

    def __init__(self, src, u, v):
        self.toks = [m.groups() for m in self.tok.finditer(src) if any(m.groups())]
        self.i = 0
        self.env = {"u": np.float64(u), "v": np.float64(v), "pi": np.float64(math.pi)}

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, None)

    def take(self):
        t = self.peek()
        self.i += 1
        return t

    def expr(self):
        x = self.term()
        while self.peek()[2] in ("+", "-"):
            op = self.take()[2]
            y = self.term()
            x = x + y if op == "+" else x - y
        return x

    def term(self):
        x = self.unary()
        while self.peek()[2] in ("*", "/"):
            op = self.take()[2]
            y = self.unary()
            x = x * y if op == "*" else np.divide(x, y)
        return x

    def unary(self):
        if self.peek()[2] == "-":
            self.take()
            return -self.unary()
        return self.power()

    def power(self):
        x = self.atom()
        if self.peek()[2] == "^":
            self.take()
            return np.power(x, self.unary())
        return x

    def atom(self):
        num, name, sym = self.take()
        if num is not None:
            return np.float64(float(num))
        if name is not None:
            if name in FUNCTIONS:
                self.take()
                x = self.expr()
                self.take()
                return FUNCTIONS[name](x)
            return self.env[name]
        x = self.expr()
        self.take()
        return x


VECTORS = [
    ("0", 0.3, 0.4),
    ("2*pi", 0.0, 0.0),
    ("0.3*cos(u)", 0.0, 1.0),
    ("u+v", 1.0, 2.0),
    ("sin(u)^2+cos(u)^2", 0.7, 0.0),
    ("-u^2", 3.0, 0.0),
    ("2^3^2", 0.0, 0.0),
    ("u - v - 1", 5.0, 2.0),
    ("u / v / 2", 8.0, 2.0),
    ("exp(-(u^2 + v^2)/2)", 0.4, -1.1),
    ("sqrt(abs(u*v)) + log(2 + cosh(v)) - tan(u)*sinh(v)", 0.3, 0.9),
    ("1.5e-3*u^-2", 0.25, 0.0),
    ("(u+v)*(u-v)/(1+u^2)", 1.7, -0.6),
    ("--u", 2.0, 0.0),
]


@pytest.mark.parametrize("src,u,v", VECTORS)
def test_matches_reference_to_the_bit(src, u, v):
    ref = float(RefEval(src, u, v).expr())
    got = evaluate(parse(src), (u, v))
    assert got == ref or (math.isnan(got) and math.isnan(ref))


def test_catalog_examples():
    assert evaluate(parse("0"), (1.3, -2.0)) == 0.0
    assert parse("0").is_zero
    assert evaluate(parse("2*pi"), (0, 0)) == pytest.approx(6.283185307179586, rel=0, abs=1e-15)
    assert evaluate(parse("0.3*cos(u)"), (0.0, 5.0)) == 0.3
    assert evaluate(parse("u+v"), (1, 2)) == 3
    assert abs(evaluate(parse("sin(u)^2+cos(u)^2"), (0.7, 0)) - 1) <= 1e-15


def test_precedence_and_associativity():
    assert parse("-u^2").ast == Neg(BinOp("^", Var("u"), Num(2.0)))
    assert parse("2^3^2").ast == BinOp("^", Num(2.0), BinOp("^", Num(3.0), Num(2.0)))
    assert evaluate(parse("2^3^2"), (0, 0)) == 512.0
    assert parse("u-v-1").ast == BinOp("-", BinOp("-", Var("u"), Var("v")), Num(1.0))
    assert parse("u*v+1").ast == BinOp("+", BinOp("*", Var("u"), Var("v")), Num(1.0))
    assert parse("2^-u").ast == BinOp("^", Num(2.0), Neg(Var("u")))
    assert parse(" u\t+\n v ") == parse("u+v")


def test_domain_errors():
    with pytest.raises(DomainError):
        evaluate(parse("exp(log(u))"), (-1.0, 0.0))
    with pytest.raises(DomainError):
        evaluate(parse("sqrt(v)"), (0.0, -1e-3))
    with pytest.raises(DomainError):
        evaluate(parse("1/u"), (0.0, 0.0))
    with pytest.raises(DomainError):
        evaluate(parse("u^0.5"), (-2.0, 0.0))
    assert evaluate(parse("u^2"), (-2.0, 0.0)) == 4.0


def test_array_path_masks_instead_of_raising():
    vals, bad = parse("log(u)").evaluate_array(np.array([-1.0, 0.0, 1.0, np.e]), 0.0)
    assert bad.tolist() == [True, True, False, False]
    assert vals[2:] == pytest.approx([0.0, 1.0])


def test_coordinate_count():
    with pytest.raises(ValueError):
        evaluate(parse("u"), (1.0,))


@pytest.mark.parametrize("src,offset,expected", [
    ("u +", 3, "number"),
    ("(u + v", 6, "')'"),
    ("u $ v", 2, None),
    ("sin u", 4, "'('"),
    ("u v", 2, None),
])
def test_syntax_errors_report_offset(src, offset, expected):
    with pytest.raises(ExprSyntaxError) as info:
        parse(src)
    assert info.value.offset == offset
    if expected is not None:
        assert expected in info.value.expected


def test_offset_is_in_bytes():
    with pytest.raises(ExprSyntaxError) as info:
        parse("u + π")
    assert info.value.offset == 4
    with pytest.raises(ExprSyntaxError) as info:
        parse("1 + 'é' ")
    assert info.value.offset == 4


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifier) as info:
        parse("0.3*cos(w)")
    assert info.value.name == "w" and info.value.offset == 8
    with pytest.raises(UnknownIdentifier):
        parse("sec(u)")


def test_as_expr_and_equality():
    assert as_expr(0) == parse("0")
    assert as_expr("u") is not None
    e = parse("u*v")
    assert as_expr(e) is e
    assert hash(parse("u + 1")) == hash(parse("u+1"))
    assert parse("cos(v)").variables == frozenset({"v"})
    assert parse("pi*2").is_constant


# ---------------------------------------------------------------------------
# round trip on random trees

leaves = st.one_of(
    st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False).map(Num),
    st.sampled_from([Var("u"), Var("v"), Const("pi")]),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda t: BinOp(*t)),
        st.tuples(st.sampled_from(sorted(FUNCTIONS)), children).map(lambda t: Call(*t)),
    )


def _depth(node):
    if isinstance(node, (Num, Var, Const)):
        return 0
    if isinstance(node, Neg):
        return 1 + _depth(node.operand)
    if isinstance(node, Call):
        return 1 + _depth(node.arg)
    return 1 + max(_depth(node.left), _depth(node.right))


trees = st.recursive(leaves, _extend, max_leaves=40).filter(lambda n: _depth(n) <= 6)


@settings(max_examples=1000, deadline=None)
@given(trees)
def test_print_parse_round_trip(tree):
    src = to_source(tree)
    assert parse(src).ast == tree
    assert to_source(parse(src).ast) == src


@settings(max_examples=200, deadline=None)
@given(trees, st.floats(-3, 3), st.floats(-3, 3))
def test_array_and_scalar_paths_agree(tree, u, v):
    e = parse(to_source(tree))
    vals, bad = e.evaluate_array(np.array([u]), np.array([v]))
    if bad[0]:
        with pytest.raises(DomainError):
            evaluate(e, (u, v))
    else:
        assert evaluate(e, (u, v)) == vals[0]
