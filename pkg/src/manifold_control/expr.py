"""Small arithmetic expression language for config-embedded formulas.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Evaluation is vectorised: variables may be numpy arrays and the result
broadcasts like ordinary numpy arithmetic.
"""

from __future__ import annotations

import re
from typing import Iterable, Tuple

import numpy as np

from .errors import ExpressionError

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "ln": np.log,
    "atan": np.arctan,
}

CONSTANTS = {"pi": np.pi}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^(),]))"
)


def tokenize(text: str):
    pos = 0
    out = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionError(f"unexpected character {text[pos:].strip()[:1]!r}", pos)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text, variables):
        self.tokens = tokenize(text)
        self.i = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.take()
        if tok[1] != value:
            found = tok[1] or "end of input"
            raise ExpressionError(f"expected {value!r}, found {found!r}", tok[2])
        return tok

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExpressionError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = (op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            operand = self.unary()
            return operand if op == "+" else ("neg", operand)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return ("^", base, self.unary())
        return base

    def atom(self):
        kind, value, pos = self.take()
        if kind == "num":
            return ("num", float(value))
        if kind == "name":
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    raise ExpressionError(f"unknown function {value!r}", pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return ("call", value, arg)
            if value in self.variables:
                return ("var", value)
            if value in CONSTANTS:
                return ("num", CONSTANTS[value])
            if value in FUNCTIONS:
                raise ExpressionError(f"function {value!r} needs an argument", pos)
            raise ExpressionError(f"unknown name {value!r}", pos)
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected {'end of input' if kind == 'end' else repr(value)}", pos)


def _evaluate(node, env):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        return env[node[1]]
    if tag == "neg":
        return -_evaluate(node[1], env)
    if tag == "call":
        return FUNCTIONS[node[1]](_evaluate(node[2], env))
    a = _evaluate(node[1], env)
    b = _evaluate(node[2], env)
    if tag == "+":
        return a + b
    if tag == "-":
        return a - b
    if tag == "*":
        return a * b
    if tag == "/":
        return a / b
    return np.power(a, b)


def _names(node, acc):
    if node[0] == "var":
        acc.add(node[1])
    elif node[0] in ("neg",):
        _names(node[1], acc)
    elif node[0] == "call":
        _names(node[2], acc)
    elif node[0] in ("+", "-", "*", "/", "^"):
        _names(node[1], acc)
        _names(node[2], acc)
    return acc


class Expression:
    """A parsed formula over a fixed set of variable names."""

    def __init__(self, text: str, variables: Iterable[str] = ("x", "y", "t")):
        self.text = text
        self.variables: Tuple[str, ...] = tuple(variables)
        self._tree = _Parser(text, set(self.variables)).parse()
        self.used = frozenset(_names(self._tree, set()))

    def __call__(self, **values) -> np.ndarray:
        missing = self.used - values.keys()
        if missing:
            raise ExpressionError(f"missing values for {sorted(missing)} in {self.text!r}")
        with np.errstate(all="ignore"):
            out = _evaluate(self._tree, {k: np.asarray(v, dtype=float) for k, v in values.items()})
        shape = np.broadcast_shapes(*(np.shape(values[k]) for k in self.variables if k in values))
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    def __repr__(self):
        return f"Expression({self.text!r})"


def compile_pair(texts, variables) -> Tuple[Expression, Expression]:
    if not isinstance(texts, (list, tuple)) or len(texts) != 2:
        raise ExpressionError(f"expected a pair of expressions, got {texts!r}")
    return Expression(str(texts[0]), variables), Expression(str(texts[1]), variables)


def evaluate(text: str, **values) -> np.ndarray:
    return Expression(text, tuple(values))(**values)


__all__ = ["Expression", "compile_pair", "evaluate", "tokenize", "FUNCTIONS", "CONSTANTS"]

