"""Pocket expression language for analytic model fields.

Problem files describe drifts, drivers, costs and factor fields as strings
like ``-tanh(x)*z^3 + cos(x)``.  A small recursive-descent parser turns
each string into an AST, which is then compiled either to a vectorized
numpy callable (the default) or to a plain ``math``-based scalar callable
used in hot single-path loops.  The function catalog is fixed and closed:
there is no ``eval`` and no access to anything outside the catalog.
"""

from __future__ import annotations

import math
import re

import numpy as np


class ExpressionError(ValueError):
    """Malformed expression or use of an unknown symbol."""


_NUMPY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "sech": lambda t: 1.0 / np.cosh(t),
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

_MATH_FUNCS = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "sinh": math.sinh,
    "cosh": math.cosh,
    "tanh": math.tanh,
    "sech": lambda t: 1.0 / math.cosh(t),
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
}

_CONSTANTS = {"pi": math.pi, "e": math.e}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(src):
    tokens = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None or m.end() == pos:
            tail = src[pos:].strip()
            if not tail:
                break
            raise ExpressionError(f"unexpected character {tail[0]!r} in {src!r}")
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        else:
            op = m.group("op")
            tokens.append(("op", "^" if op == "**" else op))
        pos = m.end()
    tokens.append(("end", None))
    return tokens


class _Parser:
    """expr := term (('+'|'-') term)* ; term := factor (('*'|'/') factor)* ;
    factor := unary ('^' factor)? ; unary := '-' unary | atom."""

    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.pos = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, val = self.next()
        if kind != "op" or val != op:
            raise ExpressionError(f"expected {op!r}, found {val!r}")

    def parse(self):
        node = self.expr()
        kind, val = self.peek()
        if kind != "end":
            raise ExpressionError(f"trailing input near {val!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.next()
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.factor()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.next()
            rhs = self.factor()
            node = ("mul" if op == "*" else "div", node, rhs)
        return node

    def factor(self):
        base = self.unary()
        if self.peek() == ("op", "^"):
            self.next()
            power = self.factor()  # right associative
            return ("pow", base, power)
        return base

    def unary(self):
        if self.peek() == ("op", "-"):
            self.next()
            return ("neg", self.unary())
        if self.peek() == ("op", "+"):
            self.next()
            return self.unary()
        return self.atom()

    def atom(self):
        kind, val = self.next()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            if self.peek() == ("op", "("):
                if val not in _NUMPY_FUNCS:
                    raise ExpressionError(f"unknown function {val!r}")
                self.next()
                arg = self.expr()
                self.expect_op(")")
                return ("call", val, arg)
            if val in _CONSTANTS:
                return ("num", _CONSTANTS[val])
            if val not in self.variables:
                raise ExpressionError(
                    f"unknown variable {val!r}; expected one of {sorted(self.variables)}"
                )
            return ("var", val)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionError(f"unexpected token {val!r}")


def parse(src, variables):
    """Parse one expression string over the given variable names."""
    return _Parser(_tokenize(src), frozenset(variables)).parse()


def parse_list(src, variables):
    """Parse a comma-separated list of expressions (vector components)."""
    parts = _split_top_level(src)
    return [parse(p, variables) for p in parts]


def _split_top_level(src):
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(src):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(src[start:i])
            start = i + 1
    parts.append(src[start:])
    if any(not p.strip() for p in parts):
        raise ExpressionError(f"empty component in expression list {src!r}")
    return parts


def free_vars(node):
    kind = node[0]
    if kind == "num":
        return set()
    if kind == "var":
        return {node[1]}
    if kind == "call":
        return free_vars(node[2])
    if kind == "neg":
        return free_vars(node[1])
    return free_vars(node[1]) | free_vars(node[2])


def _compile(node, env_index, funcs):
    kind = node[0]
    if kind == "num":
        v = node[1]
        return lambda env: v
    if kind == "var":
        i = env_index[node[1]]
        return lambda env: env[i]
    if kind == "neg":
        a = _compile(node[1], env_index, funcs)
        return lambda env: -a(env)
    if kind == "call":
        fn = funcs[node[1]]
        a = _compile(node[2], env_index, funcs)
        return lambda env: fn(a(env))
    a = _compile(node[1], env_index, funcs)
    b = _compile(node[2], env_index, funcs)
    if kind == "add":
        return lambda env: a(env) + b(env)
    if kind == "sub":
        return lambda env: a(env) - b(env)
    if kind == "mul":
        return lambda env: a(env) * b(env)
    if kind == "div":
        return lambda env: a(env) / b(env)
    if kind == "pow":
        return lambda env: a(env) ** b(env)
    raise ExpressionError(f"unknown node kind {kind!r}")


def compile_numpy(node, env_index):
    """Compile to a callable taking one positional array per slot.

    ``env_index`` maps variable names to positional argument slots; several
    names may share a slot (aliases like ``x`` and ``x1`` in one dimension).
    """
    body = _compile(node, env_index, _NUMPY_FUNCS)

    def fn(*args):
        return body(args)

    return fn


def compile_scalar(node, env_index):
    """Compile to a float-only callable for tight sequential loops."""
    body = _compile(node, env_index, _MATH_FUNCS)

    def fn(*args):
        return body(args)

    return fn


def slot_names(prefix, dim):
    """Variable names addressing the components of one vector argument.

    Returns a list of name lists, one per component: in one dimension the
    bare name and the indexed name are aliases (``x`` == ``x1``).
    """
    if dim == 1:
        return [[prefix, prefix + "1"]]
    return [[f"{prefix}{i}"] for i in range(1, dim + 1)]


def build_env_index(prefix_dims):
    """Positional slot table for a sequence of (prefix, dim) arguments."""
    env_index = {}
    slot = 0
    for prefix, dim in prefix_dims:
        for names in slot_names(prefix, dim):
            for name in names:
                env_index[name] = slot
            slot += 1
    return env_index
