"""Arithmetic expressions in x and theta for configuration files.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := unary ('^' factor)?
    unary  := '-'? atom
    atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'

so ``^`` is right-associative and ``-2^2`` is ``(-2)^2``.  Positions in errors
are byte offsets into the UTF-8 source.  Evaluation is vectorised over numpy
arrays and raises EvaluationError on division by zero or a function argument
outside its domain.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import StopdexError


class ExpressionError(StopdexError):
    def __init__(self, message, position=None):
        where = "" if position is None else f" at byte {position}"
        super().__init__(f"{message}{where}")
        self.position = position


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message, position, expected=()):
        if expected:
            message = f"{message}; expected {' or '.join(expected)}"
        super().__init__(message, position)
        self.expected = tuple(expected)


class UnknownIdentifier(ExpressionError):
    pass


class ArityMismatch(ExpressionError):
    pass


class EvaluationError(ExpressionError):
    pass


VARIABLES = ("x", "theta")
CONSTANTS = {"pi": math.pi, "e": math.e}


def _coth(v):
    return np.cosh(v) / np.sinh(v)


# name -> (callable, arity or None for variadic >= 2, domain check returning a bad-mask)
FUNCTIONS = {
    "sin": (np.sin, 1, None),
    "cos": (np.cos, 1, None),
    "tan": (np.tan, 1, None),
    "sinh": (np.sinh, 1, None),
    "cosh": (np.cosh, 1, None),
    "tanh": (np.tanh, 1, None),
    "coth": (_coth, 1, lambda a: a == 0),
    "exp": (np.exp, 1, None),
    "log": (np.log, 1, lambda a: a <= 0),
    "sqrt": (np.sqrt, 1, lambda a: a < 0),
    "abs": (np.abs, 1, None),
    "min": (np.minimum, None, None),
    "max": (np.maximum, None, None),
    "pow": (None, 2, None),
}


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Name:
    """A variable, a built-in constant or a user constant."""
    name: str
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    operand: object
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: int = field(default=0, compare=False)


_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


def _tokenize(text):
    out = []
    i = 0
    while i < len(text):
        m = _TOKEN.match(text, i)
        if m is None:
            raise ExpressionSyntaxError(f"unexpected character {text[i]!r}", _byte(text, i))
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), _byte(text, i)))
        i = m.end()
    out.append(("end", "", _byte(text, len(text))))
    return out


def _byte(text, i):
    return len(text[:i].encode("utf-8"))


class _Parser:
    def __init__(self, text, names):
        self.toks = _tokenize(text)
        self.i = 0
        self.names = names

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind != "op":
            raise ExpressionSyntaxError(f"unexpected {text or 'end of input'!r}", pos, (repr(value),))

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.factor(), pos)
        return node

    def factor(self):
        node = self.unary()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            _, _, pos = self.take()
            return BinOp("^", node, self.factor(), pos)
        return node

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            _, _, pos = self.take()
            return Neg(self.atom(), pos)
        return self.atom()

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text), pos)
        if kind == "ident":
            if self.peek()[1] == "(":
                return self.call(text, pos)
            if text in FUNCTIONS:
                raise ExpressionSyntaxError(f"function {text!r} needs arguments", pos, ("'('",))
            if text not in self.names:
                raise UnknownIdentifier(f"unknown identifier {text!r}", pos)
            return Name(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionSyntaxError(f"unexpected {text or 'end of input'!r}", pos,
                                    ("number", "identifier", "'('", "'-'"))

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise UnknownIdentifier(f"unknown function {name!r}", pos)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        arity = FUNCTIONS[name][1]
        if (arity is None and len(args) < 2) or (arity is not None and len(args) != arity):
            want = "at least 2" if arity is None else str(arity)
            raise ArityMismatch(f"{name} takes {want} argument(s), got {len(args)}", pos)
        return Call(name, tuple(args), pos)


def parse_expression(text: str, constants: Optional[Mapping[str, float]] = None):
    """Parse ``text`` into an AST; ``constants`` adds named numbers to the namespace."""
    names = set(VARIABLES) | set(CONSTANTS) | set(constants or ())
    p = _Parser(text, names)
    node = p.expr()
    kind, tok, pos = p.peek()
    if kind != "end":
        raise ExpressionSyntaxError(f"unexpected {tok!r}", pos, ("operator", "end of input"))
    return node


def pretty(node) -> str:
    """Fully parenthesised source that parses back to the same tree."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Name):
        return node.name
    if isinstance(node, Neg):
        return f"(-{pretty(node.operand)})"
    if isinstance(node, BinOp):
        return f"({pretty(node.left)} {node.op} {pretty(node.right)})"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(pretty(a) for a in node.args)})"
    raise TypeError(node)


def free_names(node) -> set:
    if isinstance(node, Name):
        return {node.name}
    if isinstance(node, Neg):
        return free_names(node.operand)
    if isinstance(node, BinOp):
        return free_names(node.left) | free_names(node.right)
    if isinstance(node, Call):
        return set().union(*(free_names(a) for a in node.args))
    return set()


def evaluate(node, env: Mapping[str, object]):
    """Value of the tree with ``env`` supplying x, theta and user constants."""
    with np.errstate(all="ignore"):
        return _eval(node, env)


def _fail_if(mask, message, pos):
    if np.any(mask):
        raise EvaluationError(message, pos)


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        if node.name in env:
            return env[node.name]
        if node.name in CONSTANTS:
            return CONSTANTS[node.name]
        raise UnknownIdentifier(f"no value for {node.name!r}", node.pos)
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            _fail_if(np.asarray(b) == 0, "division by zero", node.pos)
            return np.divide(a, b)
        return _power(a, b, node.pos)
    if isinstance(node, Call):
        args = [_eval(a, env) for a in node.args]
        fn, _, bad = FUNCTIONS[node.name]
        if node.name == "pow":
            return _power(args[0], args[1], node.pos)
        if bad is not None:
            _fail_if(bad(np.asarray(args[0])), f"{node.name} argument outside its domain", node.pos)
        if fn is np.minimum or fn is np.maximum:
            out = args[0]
            for a in args[1:]:
                out = fn(out, a)
            return out
        return fn(args[0])
    raise TypeError(node)


def _power(a, b, pos):
    aa, bb = np.asarray(a, float), np.asarray(b, float)
    _fail_if((aa == 0) & (bb < 0), "zero raised to a negative power", pos)
    _fail_if((aa < 0) & (bb != np.round(bb)), "negative base with a non-integer exponent", pos)
    out = np.power(aa, bb)
    return out if np.ndim(out) else float(out)


class Compiled:
    """A parsed expression bound to user constants, callable as f(x, theta)."""

    def __init__(self, text, constants=None):
        self.text = text
        self.constants = dict(constants or {})
        self.ast = parse_expression(text, self.constants)
        self.names = free_names(self.ast)

    def uses(self, name):
        return name in self.names

    def __call__(self, x=0.0, theta=0.0):
        env = dict(self.constants)
        env["x"], env["theta"] = x, theta
        shape = np.broadcast(np.asarray(x), np.asarray(theta)).shape
        return np.broadcast_to(np.asarray(evaluate(self.ast, env), float), shape).copy() \
            if shape else float(evaluate(self.ast, env))

    def __repr__(self):
        return f"Compiled({self.text!r})"
