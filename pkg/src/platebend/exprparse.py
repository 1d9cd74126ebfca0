"""Small arithmetic expression language for scenario data.

Config files describe metrics, forces, and boundary data as strings like
"0.2*r^4*sin(6*atan2(x2,x1))" over the variables x1, x2, t, and the
derived radius r = sqrt(x1^2 + x2^2).  Expressions are parsed once into
an AST and evaluated with numpy broadcasting, so a compiled expression
maps arrays to arrays.  Unknown names are rejected at compile time with
the offending position; there is no eval() anywhere.

Grammar (usual precedence, ^ and ** both mean power, right associative):

  expr   := term (('+' | '-') term)*
  term   := unary (('*' | '/') unary)*
  unary  := ('+' | '-') unary | power
  power  := atom (('^' | '**') unary)?
  atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_FUNCTIONS = {
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "tan": (np.tan, 1),
    "asin": (np.arcsin, 1),
    "acos": (np.arccos, 1),
    "atan": (np.arctan, 1),
    "atan2": (np.arctan2, 2),
    "sinh": (np.sinh, 1),
    "cosh": (np.cosh, 1),
    "tanh": (np.tanh, 1),
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "sqrt": (np.sqrt, 1),
    "abs": (np.abs, 1),
    "min": (np.minimum, 2),
    "max": (np.maximum, 2),
    "pow": (np.power, 2),
}

_CONSTANTS = {"pi": math.pi, "e": math.e}

DEFAULT_VARIABLES = ("x1", "x2", "t", "r")


@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "name", "op", "end"
    text: str
    pos: int


def _tokenize(src: str) -> list[_Token]:
    tokens = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            tokens.append(_Token("num", src[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            tokens.append(_Token("name", src[i:j], i))
            i = j
            continue
        if src.startswith("**", i):
            tokens.append(_Token("op", "**", i))
            i += 2
            continue
        if c in "+-*/^(),":
            tokens.append(_Token("op", c, i))
            i += 1
            continue
        raise ConfigError(f"unexpected character {c!r} at position {i} in {src!r}")
    tokens.append(_Token("end", "", n))
    return tokens


# AST nodes are tuples: ("num", v) | ("var", name) | ("neg", node)
# | ("bin", op, left, right) | ("call", fn, args)


class _Parser:
    def __init__(self, src: str, variables: tuple[str, ...]):
        self.src = src
        self.variables = variables
        self.tokens = _tokenize(src)
        self.k = 0

    def peek(self) -> _Token:
        return self.tokens[self.k]

    def next(self) -> _Token:
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect(self, text: str) -> None:
        tok = self.next()
        if tok.text != text:
            raise ConfigError(
                f"expected {text!r} at position {tok.pos} in {self.src!r}, "
                f"got {tok.text!r}"
            )

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ConfigError(
                f"trailing input at position {tok.pos} in {self.src!r}"
            )
        return node

    def expr(self):
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok.text == "-":
            self.next()
            return ("neg", self.unary())
        if tok.text == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self):
        node = self.atom()
        if self.peek().text in ("^", "**"):
            self.next()
            node = ("bin", "^", node, self.unary())
        return node

    def atom(self):
        tok = self.next()
        if tok.kind == "num":
            return ("num", float(tok.text))
        if tok.kind == "name":
            if self.peek().text == "(":
                if tok.text not in _FUNCTIONS:
                    raise ConfigError(
                        f"unknown function {tok.text!r} at position {tok.pos} "
                        f"in {self.src!r}"
                    )
                self.next()
                args = [self.expr()]
                while self.peek().text == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                _, arity = _FUNCTIONS[tok.text]
                if len(args) != arity:
                    raise ConfigError(
                        f"{tok.text} takes {arity} argument(s), got {len(args)} "
                        f"in {self.src!r}"
                    )
                return ("call", tok.text, args)
            if tok.text in _CONSTANTS:
                return ("num", _CONSTANTS[tok.text])
            if tok.text not in self.variables:
                raise ConfigError(
                    f"unknown name {tok.text!r} at position {tok.pos} in "
                    f"{self.src!r} (variables: {', '.join(self.variables)})"
                )
            return ("var", tok.text)
        if tok.text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ConfigError(
            f"unexpected token {tok.text!r} at position {tok.pos} in {self.src!r}"
        )


def _evaluate(node, values: dict) -> np.ndarray | float:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return values[node[1]]
    if kind == "neg":
        return -_evaluate(node[1], values)
    if kind == "bin":
        _, op, left, right = node
        a = _evaluate(left, values)
        b = _evaluate(right, values)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return a / b
        return np.power(a, b)
    _, name, args = node
    fn, _ = _FUNCTIONS[name]
    return fn(*[_evaluate(a, values) for a in args])


@dataclass(frozen=True)
class Expression:
    """A compiled scalar expression; call with keyword arrays."""

    source: str
    variables: tuple[str, ...]
    _ast: tuple

    def __call__(self, **values) -> np.ndarray:
        missing = [v for v in self.variables if v not in values and v != "r"]
        if missing:
            raise ConfigError(
                f"expression {self.source!r} needs values for {missing}"
            )
        if "r" in self.variables and "r" not in values:
            values = dict(values)
            values["r"] = np.sqrt(
                np.asarray(values["x1"]) ** 2 + np.asarray(values["x2"]) ** 2
            )
        out = _evaluate(self._ast, values)
        return np.asarray(out, dtype=np.float64)

    @property
    def uses_time(self) -> bool:
        def walk(node) -> bool:
            if node[0] == "var":
                return node[1] == "t"
            if node[0] == "neg":
                return walk(node[1])
            if node[0] == "bin":
                return walk(node[2]) or walk(node[3])
            if node[0] == "call":
                return any(walk(a) for a in node[2])
            return False

        return walk(self._ast)


def compile_expression(
    src: str, variables: tuple[str, ...] = DEFAULT_VARIABLES
) -> Expression:
    """Parse src into an Expression over the given variable names."""
    if not isinstance(src, str):
        raise ConfigError(f"expected an expression string, got {type(src).__name__}")
    ast = _Parser(src, variables).parse()
    return Expression(source=src, variables=variables, _ast=ast)


def compile_vector(
    sources, variables: tuple[str, ...] = DEFAULT_VARIABLES
) -> list[Expression]:
    """Compile a list of expression strings."""
    if not isinstance(sources, (list, tuple)):
        raise ConfigError("expected a list of expression strings")
    return [compile_expression(s, variables) for s in sources]
