"""
Expression trees for system dynamics.

Nodes are immutable dataclasses. Printing, differentiation, evaluation and
polynomial conversion are single-dispatch functions over the node types, so
every consumer walks the same tree representation.
"""
import logging
import math
import re
from dataclasses import dataclass
from functools import singledispatch
from typing import ClassVar, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from app.services.polycore import Polynomial

logger = logging.getLogger(__name__)

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")


class ModelError(ValueError):
    """Invalid system description; optionally carries a source position."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ParseError(ModelError):
    """Syntax error in an expression or system document."""


# ============ Nodes ============

class Expr:
    precedence: ClassVar[int] = 5

    def __str__(self) -> str:
        return to_string(self)

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: int):
        return power(self, exponent)


@dataclass(frozen=True)
class Const(Expr):
    value: float

    @property
    def precedence(self) -> int:
        return 3 if self.value < 0 else 5


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr
    precedence: ClassVar[int] = 3


@dataclass(frozen=True)
class BinOp(Expr):
    left: Expr
    right: Expr
    symbol: ClassVar[str] = "?"


@dataclass(frozen=True)
class Add(BinOp):
    symbol: ClassVar[str] = " + "
    precedence: ClassVar[int] = 1


@dataclass(frozen=True)
class Sub(BinOp):
    symbol: ClassVar[str] = " - "
    precedence: ClassVar[int] = 1


@dataclass(frozen=True)
class Mul(BinOp):
    symbol: ClassVar[str] = "*"
    precedence: ClassVar[int] = 2


@dataclass(frozen=True)
class Div(BinOp):
    symbol: ClassVar[str] = "/"
    precedence: ClassVar[int] = 2


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int
    precedence: ClassVar[int] = 4


@dataclass(frozen=True)
class Func(Expr):
    name: str
    arg: Expr


def _lift(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Const(float(value))
    raise TypeError(f"Cannot use {type(value).__name__} in an expression")


# ============ Simplifying constructors ============

def _is_const(e: Expr, value: Optional[float] = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    return Sub(a, b)


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        raise ModelError("Division by the constant zero")
    if _is_const(a) and _is_const(b):
        return Const(a.value / b.value)
    if _is_const(a, 0.0):
        return Const(0.0)
    if _is_const(b, 1.0):
        return a
    return Div(a, b)


def power(a: Expr, exponent: int) -> Expr:
    if exponent < 0:
        raise ModelError(f"Negative exponent {exponent}")
    if exponent == 0:
        return Const(1.0)
    if exponent == 1:
        return a
    if _is_const(a):
        return Const(a.value ** exponent)
    return Pow(a, exponent)


def func(name: str, arg: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ModelError(f"Unknown function '{name}'")
    if _is_const(arg):
        try:
            value = _FLOAT_FUNCS[name](arg.value)
        except OverflowError:
            value = math.inf
        if math.isfinite(value):
            return Const(value)
    return Func(name, arg)


_FLOAT_FUNCS = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": lambda v: math.log(v) if v > 0 else math.nan,
    "sqrt": lambda v: math.sqrt(v) if v >= 0 else math.nan,
    "tanh": math.tanh,
}

_ARRAY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
}


# ============ Printing ============

def _wrap(child: Expr, needs_parens: bool) -> str:
    text = to_string(child)
    return f"({text})" if needs_parens else text


@singledispatch
def to_string(e: Expr) -> str:
    raise TypeError(f"Unsupported node {type(e).__name__}")


@to_string.register
def _(e: Const) -> str:
    return repr(float(e.value))


@to_string.register
def _(e: Var) -> str:
    return e.name


@to_string.register
def _(e: Neg) -> str:
    return "-" + _wrap(e.arg, isinstance(e.arg, Const) or e.arg.precedence < Neg.precedence)


@to_string.register
def _(e: BinOp) -> str:
    left = _wrap(e.left, e.left.precedence < e.precedence)
    right = _wrap(e.right, e.right.precedence <= e.precedence)
    return f"{left}{e.symbol}{right}"


@to_string.register
def _(e: Pow) -> str:
    return f"{_wrap(e.base, e.base.precedence <= Pow.precedence)}^{e.exponent}"


@to_string.register
def _(e: Func) -> str:
    return f"{e.name}({to_string(e.arg)})"


# ============ Structure ============

@singledispatch
def free_vars(e: Expr) -> FrozenSet[str]:
    raise TypeError(f"Unsupported node {type(e).__name__}")


@free_vars.register
def _(e: Const) -> FrozenSet[str]:
    return frozenset()


@free_vars.register
def _(e: Var) -> FrozenSet[str]:
    return frozenset((e.name,))


@free_vars.register
def _(e: Neg) -> FrozenSet[str]:
    return free_vars(e.arg)


@free_vars.register
def _(e: BinOp) -> FrozenSet[str]:
    return free_vars(e.left) | free_vars(e.right)


@free_vars.register
def _(e: Pow) -> FrozenSet[str]:
    return free_vars(e.base)


@free_vars.register
def _(e: Func) -> FrozenSet[str]:
    return free_vars(e.arg)


def substitute_expr(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions, re-simplifying on the way up."""
    if isinstance(e, Const):
        return e
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Neg):
        return neg(substitute_expr(e.arg, mapping))
    if isinstance(e, BinOp):
        build = {Add: add, Sub: sub, Mul: mul, Div: div}[type(e)]
        return build(substitute_expr(e.left, mapping), substitute_expr(e.right, mapping))
    if isinstance(e, Pow):
        return power(substitute_expr(e.base, mapping), e.exponent)
    if isinstance(e, Func):
        return func(e.name, substitute_expr(e.arg, mapping))
    raise TypeError(f"Unsupported node {type(e).__name__}")


def subterms(e: Expr) -> Iterable[Expr]:
    yield e
    if isinstance(e, (Neg, Func)):
        yield from subterms(e.arg)
    elif isinstance(e, BinOp):
        yield from subterms(e.left)
        yield from subterms(e.right)
    elif isinstance(e, Pow):
        yield from subterms(e.base)


# ============ Differentiation ============

@singledispatch
def _diff(e: Expr, var: str) -> Expr:
    raise TypeError(f"Unsupported node {type(e).__name__}")


@_diff.register
def _(e: Const, var: str) -> Expr:
    return Const(0.0)


@_diff.register
def _(e: Var, var: str) -> Expr:
    return Const(1.0 if e.name == var else 0.0)


@_diff.register
def _(e: Neg, var: str) -> Expr:
    return neg(_diff(e.arg, var))


@_diff.register
def _(e: Add, var: str) -> Expr:
    return add(_diff(e.left, var), _diff(e.right, var))


@_diff.register
def _(e: Sub, var: str) -> Expr:
    return sub(_diff(e.left, var), _diff(e.right, var))


@_diff.register
def _(e: Mul, var: str) -> Expr:
    return add(mul(_diff(e.left, var), e.right), mul(e.left, _diff(e.right, var)))


@_diff.register
def _(e: Div, var: str) -> Expr:
    da, db = _diff(e.left, var), _diff(e.right, var)
    if _is_const(db, 0.0):
        return div(da, e.right)
    return div(sub(mul(da, e.right), mul(e.left, db)), power(e.right, 2))


@_diff.register
def _(e: Pow, var: str) -> Expr:
    inner = _diff(e.base, var)
    if _is_const(inner, 0.0):
        return Const(0.0)
    return mul(mul(Const(float(e.exponent)), power(e.base, e.exponent - 1)), inner)


@_diff.register
def _(e: Func, var: str) -> Expr:
    inner = _diff(e.arg, var)
    if _is_const(inner, 0.0):
        return Const(0.0)
    if e.name == "sin":
        outer = func("cos", e.arg)
    elif e.name == "cos":
        outer = neg(func("sin", e.arg))
    elif e.name == "exp":
        outer = e
    elif e.name == "log":
        return div(inner, e.arg)
    elif e.name == "sqrt":
        return div(inner, mul(Const(2.0), e))
    else:
        outer = sub(Const(1.0), power(e, 2))
    return mul(outer, inner)


def diff_expr(e: Expr, var: str, box=None) -> Expr:
    """Symbolic partial derivative with constant folding.

    When `box` (name -> Interval) is given, log/sqrt arguments and divisors are
    first checked to stay away from their singular values over the box.
    """
    if box is not None:
        from app.services.interval import check_differentiable

        check_differentiable(e, box)
    return _diff(e, var)


# ============ Evaluation ============

ArrayLike = Union[float, np.ndarray]


@singledispatch
def evaluate(e: Expr, env: Mapping[str, ArrayLike]) -> ArrayLike:
    """Numeric evaluation; env values may be floats or equally shaped arrays."""
    raise TypeError(f"Unsupported node {type(e).__name__}")


@evaluate.register
def _(e: Const, env) -> ArrayLike:
    return e.value


@evaluate.register
def _(e: Var, env) -> ArrayLike:
    try:
        return env[e.name]
    except KeyError:
        raise ModelError(f"No value for variable '{e.name}'")


@evaluate.register
def _(e: Neg, env) -> ArrayLike:
    return -evaluate(e.arg, env)


@evaluate.register
def _(e: Add, env) -> ArrayLike:
    return evaluate(e.left, env) + evaluate(e.right, env)


@evaluate.register
def _(e: Sub, env) -> ArrayLike:
    return evaluate(e.left, env) - evaluate(e.right, env)


@evaluate.register
def _(e: Mul, env) -> ArrayLike:
    return evaluate(e.left, env) * evaluate(e.right, env)


@evaluate.register
def _(e: Div, env) -> ArrayLike:
    return evaluate(e.left, env) / evaluate(e.right, env)


@evaluate.register
def _(e: Pow, env) -> ArrayLike:
    return evaluate(e.base, env) ** e.exponent


@evaluate.register
def _(e: Func, env) -> ArrayLike:
    return _ARRAY_FUNCS[e.name](evaluate(e.arg, env))


def eval_point(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate at a point; domain violations raise ModelError."""
    with np.errstate(all="ignore"):
        value = float(evaluate(e, {k: float(v) for k, v in env.items()}))
    if not math.isfinite(value):
        raise ModelError(f"Expression {e} is undefined at {dict(env)}")
    return value


# ============ Polynomial conversion ============

def to_polynomial(e: Expr, variables: Sequence[str]) -> Optional[Polynomial]:
    """Exact polynomial form of `e`, or None when `e` is not polynomial."""
    variables = tuple(variables)
    if isinstance(e, Const):
        return Polynomial.constant(variables, e.value)
    if isinstance(e, Var):
        if e.name not in variables:
            raise ModelError(f"Undeclared variable '{e.name}'")
        return Polynomial.variable(variables, e.name)
    if isinstance(e, Neg):
        inner = to_polynomial(e.arg, variables)
        return None if inner is None else -inner
    if isinstance(e, Pow):
        base = to_polynomial(e.base, variables)
        return None if base is None else base ** e.exponent
    if isinstance(e, Func):
        inner = to_polynomial(e.arg, variables)
        if inner is not None and inner.degree <= 0:
            folded = func(e.name, Const(inner.constant_term()))
            if isinstance(folded, Const):
                return Polynomial.constant(variables, folded.value)
        return None
    if isinstance(e, BinOp):
        left = to_polynomial(e.left, variables)
        right = to_polynomial(e.right, variables)
        if left is None or right is None:
            return None
        if isinstance(e, Add):
            return left + right
        if isinstance(e, Sub):
            return left - right
        if isinstance(e, Mul):
            return left * right
        if right.degree > 0 or right.is_zero:
            return None
        return left / right.constant_term()
    raise TypeError(f"Unsupported node {type(e).__name__}")


def from_polynomial(p: Polynomial) -> Expr:
    """Expression tree of a polynomial, terms in descending graded-lex order."""
    result: Expr = Const(0.0)
    for alpha, c in p.sorted_terms(descending=True):
        term: Expr = Const(c)
        for name, k in zip(p.vars, alpha):
            if k:
                term = mul(term, power(Var(name), k))
        result = add(result, term)
    return result


# ============ Tokenizer and expression parser ============

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|[-+*/^()\[\],;='])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ParseError(f"Unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = match.lastgroup
        if kind == "nl":
            line += 1
            line_start = match.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, match.group(), line, match.start() - line_start + 1))
        pos = match.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class ExprParser:
    """Recursive-descent parser over a token list.

    Grammar (loosest first): sum of terms, product of unaries, unary minus,
    power with a nonnegative integer exponent, atoms (number, variable,
    function call, parenthesized expression).
    """

    def __init__(self, tokens: List[Token], variables: Optional[Iterable[str]] = None):
        self.tokens = tokens
        self.pos = 0
        self.variables = None if variables is None else set(variables)

    # token helpers

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def peek(self, offset: int = 1) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> Token:
        token = self.tokens[self.pos]
        if token.kind != "eof":
            self.pos += 1
        return token

    def error(self, message: str, token: Optional[Token] = None) -> ParseError:
        token = token or self.current
        found = token.text or "end of input"
        return ParseError(f"{message} (found {found!r})", token.line, token.column)

    def accept(self, text: str) -> bool:
        if self.current.kind in ("op", "name") and self.current.text == text:
            self.advance()
            return True
        return False

    def expect(self, text: str) -> Token:
        if self.current.text != text or self.current.kind not in ("op", "name"):
            raise self.error(f"Expected {text!r}")
        return self.advance()

    def expect_name(self) -> Token:
        if self.current.kind != "name":
            raise self.error("Expected a name")
        return self.advance()

    # grammar

    def parse_expression(self) -> Expr:
        left = self.parse_term()
        while self.current.kind == "op" and self.current.text in "+-":
            op = self.advance().text
            right = self.parse_term()
            left = Add(left, right) if op == "+" else Sub(left, right)
        return left

    def parse_term(self) -> Expr:
        left = self.parse_unary()
        while self.current.kind == "op" and self.current.text in ("*", "/"):
            op = self.advance().text
            right = self.parse_unary()
            left = Mul(left, right) if op == "*" else Div(left, right)
        return left

    def parse_unary(self) -> Expr:
        if self.current.kind == "op" and self.current.text == "-":
            nxt, after = self.peek(1), self.peek(2)
            if nxt.kind == "num" and not (after.kind == "op" and after.text == "^"):
                self.advance()
                return Const(-float(self.advance().text))
            self.advance()
            return Neg(self.parse_unary())
        if self.current.kind == "op" and self.current.text == "+":
            self.advance()
            return self.parse_unary()
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        if self.current.kind == "op" and self.current.text == "^":
            self.advance()
            token = self.current
            if token.kind != "num" or not re.fullmatch(r"\d+", token.text):
                raise self.error("Exponent must be a nonnegative integer literal")
            self.advance()
            return Pow(base, int(token.text))
        return base

    def parse_atom(self) -> Expr:
        token = self.current
        if token.kind == "num":
            self.advance()
            return Const(float(token.text))
        if token.kind == "name":
            self.advance()
            if self.current.kind == "op" and self.current.text == "(":
                if token.text not in FUNCTIONS:
                    raise self.error(f"Unknown function '{token.text}'", token)
                self.advance()
                arg = self.parse_expression()
                self.expect(")")
                return Func(token.text, arg)
            if token.text in FUNCTIONS:
                raise self.error(f"Function '{token.text}' needs an argument", token)
            if self.variables is not None and token.text not in self.variables:
                raise ModelError(f"Undeclared variable '{token.text}'", token.line, token.column)
            return Var(token.text)
        if token.kind == "op" and token.text == "(":
            self.advance()
            inner = self.parse_expression()
            self.expect(")")
            return inner
        raise self.error("Expected an expression")


def parse_expr(text: str, variables: Optional[Iterable[str]] = None) -> Expr:
    """Parse a standalone expression; optionally restrict the allowed variables."""
    parser = ExprParser(tokenize(text), variables)
    expr = parser.parse_expression()
    if parser.current.kind != "eof":
        raise parser.error("Unexpected trailing input")
    return expr
