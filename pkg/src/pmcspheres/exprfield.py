"""Closed-form scalar expressions in chart coordinates.

Expressions are parsed from a small infix grammar into an immutable tree and
evaluated together with their partial derivatives by propagating truncated
Taylor polynomials (:mod:`pmcspheres.taylor`) through the tree.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ['^' intexp]
    intexp := ['-'] INT | '(' ['-'] INT ')'
    atom   := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'

``VAR`` is ``x1`` .. ``x{dim}``, ``FUNC`` one of sin, cos, exp, log, sqrt.
Whitespace is insignificant. Powers take integer exponents only.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .taylor import Jet

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")


class ExprError(ValueError):
    pass


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class VariableRangeError(ExprError):
    def __init__(self, name: str, dim: int, offset: int):
        super().__init__(f"variable {name} out of range for dimension {dim} (offset {offset})")
        self.name = name
        self.offset = offset


class DomainError(ExprError, ArithmeticError):
    def __init__(self, message: str, subexpr: "Expr"):
        super().__init__(f"{message}: {subexpr.to_text()}")
        self.subexpr = subexpr


# --------------------------------------------------------------------------
# tree


@dataclass(frozen=True, eq=False)
class Const:
    value: float

    def to_text(self) -> str:
        if self.value < 0:
            return f"(-{-self.value!r})"
        return repr(float(self.value))


@dataclass(frozen=True, eq=False)
class Var:
    index: int  # zero based

    def to_text(self) -> str:
        return f"x{self.index + 1}"


@dataclass(frozen=True, eq=False)
class Neg:
    arg: "Expr"

    def to_text(self) -> str:
        return f"(-{self.arg.to_text()})"


@dataclass(frozen=True, eq=False)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"

    def to_text(self) -> str:
        return f"({self.left.to_text()}{self.op}{self.right.to_text()})"


@dataclass(frozen=True, eq=False)
class Pow:
    base: "Expr"
    exponent: int

    def to_text(self) -> str:
        e = str(self.exponent) if self.exponent >= 0 else f"(-{-self.exponent})"
        return f"({self.base.to_text()}^{e})"


@dataclass(frozen=True, eq=False)
class Func:
    name: str
    arg: "Expr"

    def to_text(self) -> str:
        return f"{self.name}({self.arg.to_text()})"


Node = Union[Const, Var, Neg, BinOp, Pow, Func]


@dataclass(frozen=True, eq=False)
class Expr:
    """A parsed expression in ``dim`` chart variables."""

    root: Node
    dim: int
    text: str = field(default="", compare=False)

    def to_text(self) -> str:
        return self.root.to_text()

    def __str__(self) -> str:
        return self.text or self.to_text()

    @property
    def is_constant(self) -> bool:
        return not _has_var(self.root)

    def __call__(self, point) -> np.ndarray:
        return evaluate(self, point)

    # arithmetic helpers for building expressions programmatically
    def _lift(self, other) -> Node:
        if isinstance(other, Expr):
            if other.dim != self.dim:
                raise ExprError("dimension mismatch")
            return other.root
        return Const(float(other))

    def __add__(self, other):
        return Expr(BinOp("+", self.root, self._lift(other)), self.dim)

    def __radd__(self, other):
        return Expr(BinOp("+", self._lift(other), self.root), self.dim)

    def __sub__(self, other):
        return Expr(BinOp("-", self.root, self._lift(other)), self.dim)

    def __mul__(self, other):
        return Expr(BinOp("*", self.root, self._lift(other)), self.dim)

    def __rmul__(self, other):
        return Expr(BinOp("*", self._lift(other), self.root), self.dim)


def _has_var(node: Node) -> bool:
    if isinstance(node, Var):
        return True
    if isinstance(node, Const):
        return False
    if isinstance(node, BinOp):
        return _has_var(node.left) or _has_var(node.right)
    if isinstance(node, Pow):
        return _has_var(node.base)
    return _has_var(node.arg)


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = len(text) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[start]!r}", _byte_offset(text, start))
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), _byte_offset(text, m.start(kind))))
        pos = m.end()
    tokens.append(("end", "", len(text.encode())))
    return tokens


def _byte_offset(text: str, i: int) -> int:
    return len(text[:i].encode())


class _Parser:
    def __init__(self, text: str, dim: int):
        self.text = text
        self.dim = dim
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {value!r}, found {what}", off)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", off)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            base = Pow(base, self.int_exponent())
            if self.peek()[:2] == ("op", "^"):
                raise ParseError("chained '^' is not allowed; add parentheses", self.peek()[2])
        return base

    def int_exponent(self) -> int:
        paren = self.peek()[:2] == ("op", "(")
        if paren:
            self.take()
        sign = 1
        if self.peek()[:2] == ("op", "-"):
            self.take()
            sign = -1
        kind, val, off = self.take()
        if kind != "num" or not val.isdigit():
            what = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected integer exponent, found {what}", off)
        if paren:
            self.expect(")")
        return sign * int(val)

    def atom(self) -> Node:
        kind, val, off = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            m = re.fullmatch(r"x([1-9]\d*)", val)
            if m:
                k = int(m.group(1))
                if k > self.dim:
                    raise VariableRangeError(val, self.dim, off)
                return Var(k - 1)
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(val, arg)
            raise ParseError(f"unknown name {val!r}", off)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"expected operand, found {what}", off)


def parse(text: str, dim: int) -> Expr:
    """Parse ``text`` into an expression over ``x1 .. x{dim}``."""
    if dim not in (1, 2, 3):
        raise ExprError(f"unsupported dimension {dim}")
    return Expr(_Parser(text, dim).parse(), dim, text)


def constant(value: float, dim: int) -> Expr:
    return Expr(Const(float(value)), dim, repr(float(value)))


# --------------------------------------------------------------------------
# evaluation


def _func_derivs(name: str, a0: np.ndarray, order: int, node: Func):
    if name == "sin":
        cyc = [np.sin(a0), np.cos(a0), -np.sin(a0), -np.cos(a0)]
        return [cyc[k % 4] for k in range(order + 1)]
    if name == "cos":
        cyc = [np.cos(a0), -np.sin(a0), -np.cos(a0), np.sin(a0)]
        return [cyc[k % 4] for k in range(order + 1)]
    if name == "exp":
        e = np.exp(a0)
        return [e] * (order + 1)
    if name == "log":
        if np.any(a0 <= 0):
            raise DomainError("log of nonpositive value", Expr(node, 0))
        return [np.log(a0)] + [(-1.0) ** (k - 1) * math.factorial(k - 1) / a0**k for k in range(1, order + 1)]
    if name == "sqrt":
        if np.any(a0 < 0) or (order > 0 and np.any(a0 == 0)):
            raise DomainError("sqrt of nonpositive value", Expr(node, 0))
        out = []
        coef = 1.0
        for k in range(order + 1):
            out.append(coef * a0 ** (0.5 - k))
            coef *= 0.5 - k
        return out
    raise ExprError(f"unknown function {name}")


def _eval_node(node: Node, vars_: list, order: int, cache: dict):
    key = id(node)
    hit = cache.get(key)
    if hit is not None:
        return hit[1]
    if isinstance(node, Const):
        out = Jet.constant(node.value, len(vars_), order, vars_[0].batch_shape)
    elif isinstance(node, Var):
        out = vars_[node.index]
    elif isinstance(node, Neg):
        out = -_eval_node(node.arg, vars_, order, cache)
    elif isinstance(node, BinOp):
        a = _eval_node(node.left, vars_, order, cache)
        b = _eval_node(node.right, vars_, order, cache)
        if node.op == "+":
            out = a + b
        elif node.op == "-":
            out = a - b
        elif node.op == "*":
            out = a * b
        else:
            if np.any(b.value == 0):
                raise DomainError("division by zero", Expr(node.right, 0))
            out = a / b
    elif isinstance(node, Pow):
        a = _eval_node(node.base, vars_, order, cache)
        if node.exponent < 0 and np.any(a.value == 0):
            raise DomainError("negative power of zero", Expr(node.base, 0))
        out = a**node.exponent
    else:
        a = _eval_node(node.arg, vars_, order, cache)
        out = a.compose(_func_derivs(node.name, a.value, order, node))
    # keep the node alive so its id cannot be recycled during this pass
    cache[key] = (node, out)
    return out


def jets(exprs, point, order: int) -> list[Jet]:
    """Evaluate several expressions at once, sharing identical subtrees.

    ``point`` has shape ``(dim,)`` or ``(dim, *batch)``.
    """
    exprs = list(exprs)
    point = np.asarray(point, dtype=float)
    dim = point.shape[0]
    for e in exprs:
        if e.dim != dim:
            raise ExprError(f"expression has dimension {e.dim}, point has {dim}")
    vars_ = [Jet.variable(k, point[k], dim, order) for k in range(dim)]
    cache: dict = {}
    return [_eval_node(e.root, vars_, order, cache) for e in exprs]


def jet(e: Expr, point, order: int) -> Jet:
    return jets([e], point, order)[0]


def evaluate(e: Expr, point) -> np.ndarray:
    """Plain value of ``e`` at ``point`` (shape ``(dim,)`` or ``(dim, *batch)``)."""
    return jet(e, point, 0).value


@dataclass(frozen=True)
class Jet3:
    """Value and partial derivatives up to order 3 at one point.

    Orders above ``order`` were not requested; their arrays are zero.
    """

    value: float
    grad: np.ndarray
    hess: np.ndarray
    third: np.ndarray
    order: int

    def has(self, k: int) -> bool:
        return k <= self.order


def eval_jet(e: Expr, point, order: int) -> Jet3:
    if not 0 <= order <= 3:
        raise ValueError("order must be between 0 and 3")
    point = np.asarray(point, dtype=float)
    if point.shape != (e.dim,):
        raise ExprError(f"point must have shape ({e.dim},)")
    j = jet(e, point, order)
    return Jet3(
        value=float(j.value),
        grad=j.derivative_tensor(1),
        hess=j.derivative_tensor(2),
        third=j.derivative_tensor(3),
        order=order,
    )
