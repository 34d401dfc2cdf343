"""Arithmetic expression DSL used for plant dynamics, guards and resets.

Grammar (lowest to highest binding)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" INT)?
    atom   := NUMBER | NAME | FUNC "(" expr ")" | "(" expr ")"

Numeric literals denote the nearest binary64 value.  There is no implicit
multiplication, so ``3p`` is rejected.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .interval import sigmoid as _sigmoid

FUNCTIONS = ("cos", "sin", "tan", "exp", "sigmoid", "tanh")


class ParseError(ValueError):
    def __init__(self, offset: int, expected: Iterable[str], lexeme: str, text: str = ""):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        self.lexeme = lexeme
        self.text = text
        super().__init__(
            f"at offset {offset}: expected one of {', '.join(self.expected)}; got {lexeme!r}"
        )


class UnboundVariable(KeyError):
    pass


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


class Expr:
    """Immutable expression node with a cached structural hash."""

    __slots__ = ("_hash",)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"Expr({to_string(self)!r})"

    def __str__(self):
        return to_string(self)

    # operator sugar for building trees in Python code
    def __add__(self, o):
        return add(self, _lift(o))

    def __radd__(self, o):
        return add(_lift(o), self)

    def __sub__(self, o):
        return sub(self, _lift(o))

    def __rsub__(self, o):
        return sub(_lift(o), self)

    def __mul__(self, o):
        return mul(self, _lift(o))

    def __rmul__(self, o):
        return mul(_lift(o), self)

    def __truediv__(self, o):
        return div(self, _lift(o))

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)


class Const(Expr):
    __hash__ = Expr.__hash__
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)
        self._hash = hash(("c", self.value))

    def __eq__(self, o):
        return self is o or (isinstance(o, Const) and o.value == self.value)


class Var(Expr):
    __hash__ = Expr.__hash__
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name
        self._hash = hash(("v", name))

    def __eq__(self, o):
        return self is o or (isinstance(o, Var) and o.name == self.name)


class Neg(Expr):
    __hash__ = Expr.__hash__
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        self.arg = arg
        self._hash = hash(("neg", arg._hash))

    def __eq__(self, o):
        return self is o or (isinstance(o, Neg) and o._hash == self._hash and o.arg == self.arg)


class Bin(Expr):
    __hash__ = Expr.__hash__
    __slots__ = ("op", "left", "right")

    def __init__(self, op: str, left: Expr, right: Expr):
        self.op = op
        self.left = left
        self.right = right
        self._hash = hash((op, left._hash, right._hash))

    def __eq__(self, o):
        return self is o or (
            isinstance(o, Bin) and o._hash == self._hash and o.op == self.op
            and o.left == self.left and o.right == self.right
        )


class Pow(Expr):
    __hash__ = Expr.__hash__
    __slots__ = ("base", "n")

    def __init__(self, base: Expr, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("exponent must be a non-negative integer")
        self.base = base
        self.n = n
        self._hash = hash(("^", base._hash, n))

    def __eq__(self, o):
        return self is o or (
            isinstance(o, Pow) and o._hash == self._hash and o.n == self.n and o.base == self.base
        )


class Call(Expr):
    __hash__ = Expr.__hash__
    __slots__ = ("fn", "arg")

    def __init__(self, fn: str, arg: Expr):
        if fn not in FUNCTIONS:
            raise ValueError(f"unknown function {fn!r}")
        self.fn = fn
        self.arg = arg
        self._hash = hash(("f", fn, arg._hash))

    def __eq__(self, o):
        return self is o or (
            isinstance(o, Call) and o._hash == self._hash and o.fn == self.fn and o.arg == self.arg
        )


ZERO = Const(0.0)
ONE = Const(1.0)


def _lift(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        return Var(x)
    return Const(x)


# -- smart constructors (light algebraic cleanup, no CAS) ---------------------


def _is(e: Expr, v: float) -> bool:
    return isinstance(e, Const) and e.value == v


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if isinstance(b, Neg):
        return Bin("-", a, b.arg)
    if isinstance(b, Const) and b.value < 0:
        return Bin("-", a, Const(-b.value))
    return Bin("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    if a == b:
        return ZERO
    if isinstance(b, Neg):
        return Bin("+", a, b.arg)
    return Bin("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    if isinstance(b, Const) and not isinstance(a, Const):
        a, b = b, a
    if a == b:
        return Pow(a, 2)
    return Bin("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is(b, 1.0):
        return a
    if _is(a, 0.0):
        return ZERO
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    return Bin("/", a, b)


def power(a: Expr, n: int) -> Expr:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const):
        return Const(a.value ** n)
    if isinstance(a, Pow):
        return Pow(a.base, a.n * n)
    return Pow(a, n)


def call(fn: str, a: Expr) -> Expr:
    if isinstance(a, Const) and fn != "tan":
        return Const(_SCALAR[fn](a.value))
    return Call(fn, a)


# ---------------------------------------------------------------------------
# Lexer / parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9.]*)|(?P<op>[-+*/^()]))"
)


@dataclass
class _Tok:
    kind: str  # num | name | op | eof
    text: str
    pos: int


def tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(pos, ("number", "name", "operator"), text[pos], text)
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected):
        t = self.tok
        raise ParseError(t.pos, expected, t.text or "<end>", self.text)

    def eat_op(self, op: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == op:
            self.i += 1
            return True
        return False

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "eof":
            self.fail(("+", "-", "*", "/", "^", "<end>"))
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            e = Bin(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            e = Bin(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.eat_op("-"):
            a = self.unary()
            return Const(-a.value) if isinstance(a, Const) else Neg(a)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.eat_op("^"):
            t = self.tok
            if t.kind != "num" or not t.text.isdigit():
                self.fail(("non-negative integer",))
            self.i += 1
            return Pow(base, int(t.text))
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Const(float(t.text))
        if t.kind == "name":
            self.i += 1
            if t.text in FUNCTIONS:
                if not self.eat_op("("):
                    self.fail(("(",))
                arg = self.expr()
                if not self.eat_op(")"):
                    self.fail((")",))
                return Call(t.text, arg)
            return Var(t.text)
        if self.eat_op("("):
            e = self.expr()
            if not self.eat_op(")"):
                self.fail((")",))
            return e
        self.fail(("number", "name", "function", "(", "-"))


def parse(text: str) -> Expr:
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_string(e: Expr) -> str:
    return _fmt(e, 0)


def _fmt(e: Expr, ctx: int) -> str:
    # ctx: 0 top, 1 additive, 2 multiplicative, 3 unary, 4 power base
    if isinstance(e, Const):
        s = _num(e.value)
        return f"({s})" if e.value < 0 and ctx >= 4 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({_fmt(e.arg, 0)})"
    if isinstance(e, Pow):
        s = f"{_fmt(e.base, 4)}^{e.n}"
        return f"({s})" if ctx >= 4 else s
    if isinstance(e, Neg):
        inner = e.arg
        if isinstance(inner, (Var, Call, Pow)):
            s = "-" + _fmt(inner, 3)
        else:
            s = "-(" + _fmt(inner, 0) + ")"
        return f"({s})" if ctx >= 4 else s
    if isinstance(e, Bin):
        p = _PREC[e.op]
        left = _fmt(e.left, p)
        # same-precedence right operands need parens to keep left associativity
        right = _fmt(e.right, p + 1) if p == 2 else _fmt(e.right, p + 0.5)
        s = f"{left} {e.op} {right}" if p == 1 else f"{left}*{right}" if e.op == "*" else f"{left}/{right}"
        return f"({s})" if ctx > p else s
    raise TypeError(e)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_SCALAR: dict[str, Callable[[float], float]] = {
    "cos": math.cos,
    "sin": math.sin,
    "tan": math.tan,
    "exp": math.exp,
    "tanh": math.tanh,
    "sigmoid": _sigmoid,
}

_NUMPY = {
    "cos": np.cos,
    "sin": np.sin,
    "tan": np.tan,
    "exp": np.exp,
    "tanh": np.tanh,
    "sigmoid": lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
}


def apply_function(fn: str, x):
    """Apply an elementary function to a float, ndarray, Interval or TaylorModel."""
    if hasattr(x, "apply"):
        return x.apply(fn)
    if isinstance(x, np.ndarray):
        return _NUMPY[fn](x)
    return _SCALAR[fn](x)


def evaluate(e: Expr, env: Mapping[str, object], memo: dict | None = None):
    """Evaluate ``e`` with variables bound in ``env``.

    The carrier is whatever the bindings are: floats, numpy arrays, Intervals
    or TaylorModels.  ``memo`` caches shared subtrees across calls that use the
    same environment.
    """
    if memo is None:
        memo = {}
    return _eval(e, env, memo)


def _eval(e: Expr, env, memo):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVariable(e.name) from None
    hit = memo.get(e)
    if hit is not None:
        return hit
    if isinstance(e, Bin):
        a = _eval(e.left, env, memo)
        b = _eval(e.right, env, memo)
        if e.op == "+":
            r = a + b
        elif e.op == "-":
            r = a - b
        elif e.op == "*":
            r = a * b
        else:
            r = a / b
    elif isinstance(e, Neg):
        r = -_eval(e.arg, env, memo)
    elif isinstance(e, Pow):
        r = _eval(e.base, env, memo) ** e.n
    elif isinstance(e, Call):
        r = apply_function(e.fn, _eval(e.arg, env, memo))
    else:
        raise TypeError(e)
    memo[e] = r
    return r


# ---------------------------------------------------------------------------
# Symbolic manipulation
# ---------------------------------------------------------------------------


def free_vars(e: Expr) -> set[str]:
    out: set[str] = set()
    stack = [e]
    while stack:
        x = stack.pop()
        if isinstance(x, Var):
            out.add(x.name)
        elif isinstance(x, Bin):
            stack += (x.left, x.right)
        elif isinstance(x, (Neg,)):
            stack.append(x.arg)
        elif isinstance(x, Call):
            stack.append(x.arg)
        elif isinstance(x, Pow):
            stack.append(x.base)
    return out


def differentiate(e: Expr, var: str, _memo: dict | None = None) -> Expr:
    memo = {} if _memo is None else _memo
    hit = memo.get(e)
    if hit is not None:
        return hit
    d = _diff(e, var, memo)
    memo[e] = d
    return d


def _diff(e: Expr, var: str, memo) -> Expr:
    D = lambda x: differentiate(x, var, memo)  # noqa: E731
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Neg):
        return neg(D(e.arg))
    if isinstance(e, Bin):
        a, b = e.left, e.right
        if e.op == "+":
            return add(D(a), D(b))
        if e.op == "-":
            return sub(D(a), D(b))
        if e.op == "*":
            return add(mul(D(a), b), mul(a, D(b)))
        da, db = D(a), D(b)
        if _is(db, 0.0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, 2))
    if isinstance(e, Pow):
        db = D(e.base)
        if _is(db, 0.0):
            return ZERO
        return mul(mul(Const(e.n), power(e.base, e.n - 1)), db)
    if isinstance(e, Call):
        da = D(e.arg)
        if _is(da, 0.0):
            return ZERO
        a = e.arg
        if e.fn == "sigmoid":
            outer = mul(e, sub(ONE, e))
        elif e.fn == "tanh":
            outer = sub(ONE, power(e, 2))
        elif e.fn == "exp":
            outer = e
        elif e.fn == "cos":
            outer = neg(Call("sin", a))
        elif e.fn == "sin":
            outer = Call("cos", a)
        else:  # tan
            outer = add(ONE, power(e, 2))
        return mul(outer, da)
    raise TypeError(e)


def substitute(e: Expr, mapping: Mapping[str, Expr], _memo: dict | None = None) -> Expr:
    """Replace variables by expressions, re-simplifying on the way up."""
    memo = {} if _memo is None else _memo
    hit = memo.get(e)
    if hit is not None:
        return hit
    if isinstance(e, Const):
        r = e
    elif isinstance(e, Var):
        r = mapping.get(e.name, e)
        if not isinstance(r, Expr):
            r = _lift(r)
    elif isinstance(e, Neg):
        r = neg(substitute(e.arg, mapping, memo))
    elif isinstance(e, Bin):
        a = substitute(e.left, mapping, memo)
        b = substitute(e.right, mapping, memo)
        r = {"+": add, "-": sub, "*": mul, "/": div}[e.op](a, b)
    elif isinstance(e, Pow):
        r = power(substitute(e.base, mapping, memo), e.n)
    elif isinstance(e, Call):
        r = call(e.fn, substitute(e.arg, mapping, memo))
    else:
        raise TypeError(e)
    memo[e] = r
    return r


def simplify(e: Expr) -> Expr:
    return substitute(e, {})


def node_count(e: Expr) -> int:
    seen: set[int] = set()
    stack = [e]
    while stack:
        x = stack.pop()
        if id(x) in seen:
            continue
        seen.add(id(x))
        if isinstance(x, Bin):
            stack += (x.left, x.right)
        elif isinstance(x, (Neg, Call)):
            stack.append(x.arg)
        elif isinstance(x, Pow):
            stack.append(x.base)
    return len(seen)


def lie_derivatives(flows: Mapping[str, Expr], order: int) -> list[dict[str, Expr]]:
    """Return [L^1, ..., L^order] where L^1 = f and L^{k+1} = (dL^k/dx) f."""
    active = [v for v, f in flows.items() if not _is(f, 0.0)]
    out = [dict(flows)]
    for _ in range(order - 1):
        prev = out[-1]
        nxt = {}
        for v, g in prev.items():
            if _is(g, 0.0):
                nxt[v] = ZERO
                continue
            acc: Expr = ZERO
            for w in active:
                dg = differentiate(g, w)
                if not _is(dg, 0.0):
                    acc = add(acc, mul(dg, flows[w]))
            nxt[v] = acc
        out.append(nxt)
    return out


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    where: str = ""

    def __str__(self):
        return f"{type(self).__name__}({self.where})"


@dataclass(frozen=True)
class UndeclaredVariable(Diagnostic):
    name: str = ""


@dataclass(frozen=True)
class NonConstantTan(Diagnostic):
    pass


@dataclass(frozen=True)
class DivisionByZeroRisk(Diagnostic):
    pass


def validate(
    e: Expr,
    declared: Iterable[str],
    state_vars: Iterable[str] = (),
    ranges: Mapping[str, object] | None = None,
    where: str = "",
    ode_rhs: bool = False,
) -> list[Diagnostic]:
    """Check declaration and the tan/division rules for one expression.

    ``tan`` may only be applied to subexpressions free of ``state_vars``.  In
    ODE right-hand sides a denominator depending on state variables is
    rejected unless ``ranges`` prove it bounded away from zero.
    """
    declared = set(declared)
    state = set(state_vars)
    diags: list[Diagnostic] = []
    for name in sorted(free_vars(e) - declared):
        diags.append(UndeclaredVariable(where, name))
    stack = [e]
    while stack:
        x = stack.pop()
        if isinstance(x, Call):
            if x.fn == "tan" and free_vars(x.arg) & state:
                diags.append(NonConstantTan(where))
            stack.append(x.arg)
        elif isinstance(x, Bin):
            if x.op == "/" and ode_rhs and free_vars(x.right) & state:
                safe = False
                if ranges is not None:
                    try:
                        den = evaluate(x.right, ranges)
                        safe = not (den.lo <= 0.0 <= den.hi)
                    except Exception:
                        safe = False
                if not safe:
                    diags.append(DivisionByZeroRisk(where))
            stack += (x.left, x.right)
        elif isinstance(x, Neg):
            stack.append(x.arg)
        elif isinstance(x, Pow):
            stack.append(x.base)
    return diags


@dataclass(frozen=True)
class Constraint:
    """``expr op bound`` with op in {"<=", ">=", "=="}."""

    expr: Expr
    op: str
    bound: float

    def holds(self, value: float, tol: float = 0.0) -> bool:
        if self.op == "<=":
            return value <= self.bound + tol
        if self.op == ">=":
            return value >= self.bound - tol
        return abs(value - self.bound) <= tol

    def __str__(self):
        return f"{to_string(self.expr)} {self.op} {_num(self.bound)}"


_CONSTRAINT = re.compile(r"^(.*?)(<=|>=|==|=)(.*)$")


def parse_constraint(text: str) -> Constraint:
    m = _CONSTRAINT.match(text.strip())
    if not m:
        raise ParseError(0, ("<=", ">=", "=="), text, text)
    lhs, op, rhs = m.group(1), m.group(2), m.group(3)
    op = "==" if op == "=" else op
    rhs_e = parse(rhs)
    if not isinstance(rhs_e, Const):
        raise ParseError(m.start(3), ("constant",), rhs.strip(), text)
    return Constraint(parse(lhs), op, rhs_e.value)
