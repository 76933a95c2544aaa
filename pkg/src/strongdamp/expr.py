"""Scalar expression language for coefficient fields.

Expressions are written over coordinates ``q1 .. qd`` plus the reaction
variable ``u``, with ``+ - * / ^``, unary minus, parentheses and the
function set sin, cos, exp, log, sqrt, tanh, abs, min, max (min and max
take two arguments).  Parsing is a small Pratt parser; syntax errors carry
the byte offset and the token set that would have been accepted.

The AST supports four consumers: a checked tree-walking evaluator that
reports domain violations with the offending sub-expression, a code
generator that emits a fast numpy closure for hot loops, a symbolic
derivative for polynomial trees, and a canonical printer whose output
re-parses to the identical tree.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalError

# AST nodes are plain tuples:
#   ('num', float)
#   ('var', name, index)      index is 0-based for q<k>, -1 for 'u'
#   ('neg', node)
#   ('bin', op, left, right)  op in '+-*/^'
#   ('call', fname, (args...))

_FUNCTIONS = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "sqrt": 1,
    "tanh": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
}

_NUMPY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}

_VAR_RE = re.compile(r"^q([1-9][0-9]*)$")


class ExpressionSyntaxError(ConfigError):
    """Raised on malformed source; carries offset and expected token set."""

    def __init__(self, message: str, offset: int, expected=()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f"{message} at offset {offset}"
        if expected:
            detail += " (expected: " + ", ".join(sorted(expected)) + ")"
        super().__init__(detail)


class EvalDomainError(NumericalError):
    """A sub-expression was evaluated outside its domain."""

    def __init__(self, message: str, subexpr: str):
        self.subexpr = subexpr
        super().__init__(f"{message} in sub-expression '{subexpr}'")


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<sym>[-+*/^(),]))"
)


def _tokenize(src: str):
    tokens = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            # skip whitespace-only tail
            if src[pos:].strip() == "":
                break
            bad = len(src) - len(src[pos:].lstrip())
            raise ExpressionSyntaxError(
                f"unrecognized character {src[bad]!r}", bad,
                expected=("number", "identifier", "operator"))
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append((m.group("sym"), m.group("sym"), m.start("sym")))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


# binding powers: additive 10, multiplicative 20, unary minus 25, power 30
_LBP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}
_UNARY_BP = 25


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind):
        tok = self.peek()
        if tok[0] != kind:
            raise ExpressionSyntaxError(
                f"unexpected token {tok[1]!r}" if tok[0] != "end"
                else "unexpected end of input",
                tok[2], expected=(kind,))
        return self.advance()

    def parse(self):
        node = self.expression(0)
        tok = self.peek()
        if tok[0] != "end":
            raise ExpressionSyntaxError(
                f"unexpected token {tok[1]!r}", tok[2],
                expected=("operator", "end of input"))
        return node

    def expression(self, rbp):
        node = self.nud()
        while _LBP.get(self.peek()[0], -1) > rbp:
            node = self.led(node)
        return node

    def led(self, left):
        op = self.advance()[0]
        # '^' associates to the right; the others to the left
        rbp = _LBP[op] - 1 if op == "^" else _LBP[op]
        return ("bin", op, left, self.expression(rbp))

    def nud(self):
        tok = self.advance()
        kind, text, off = tok
        if kind == "num":
            return ("num", float(text))
        if kind == "name":
            if self.peek()[0] == "(":
                return self.call(text, off)
            return self.variable(text, off)
        if kind == "-":
            return ("neg", self.expression(_UNARY_BP))
        if kind == "(":
            node = self.expression(0)
            self.expect(")")
            return node
        raise ExpressionSyntaxError(
            f"unexpected token {text!r}" if kind != "end"
            else "unexpected end of input",
            off, expected=("number", "identifier", "unary -", "("))

    def variable(self, text, off):
        if text == "u":
            return ("var", "u", -1)
        m = _VAR_RE.match(text)
        if m:
            return ("var", text, int(m.group(1)) - 1)
        if text in _FUNCTIONS:
            raise ExpressionSyntaxError(
                f"function {text!r} requires arguments", off, expected=("(",))
        raise ExpressionSyntaxError(
            f"unknown identifier {text!r}", off,
            expected=("q<k>", "u", "function name"))

    def call(self, fname, off):
        if fname not in _FUNCTIONS:
            raise ExpressionSyntaxError(
                f"unknown function {fname!r}", off,
                expected=tuple(sorted(_FUNCTIONS)))
        self.expect("(")
        args = [self.expression(0)]
        while self.peek()[0] == ",":
            self.advance()
            args.append(self.expression(0))
        self.expect(")")
        nargs = _FUNCTIONS[fname]
        if len(args) != nargs:
            raise ExpressionSyntaxError(
                f"function {fname!r} takes {nargs} argument(s), got {len(args)}",
                off)
        return ("call", fname, tuple(args))


@dataclass(frozen=True)
class ScalarExpr:
    """Parsed scalar field.  Wraps the AST root and the original source."""

    root: tuple
    source: str

    def __str__(self) -> str:
        return to_string(self.root)

    @property
    def variables(self) -> frozenset:
        out = set()
        _collect_vars(self.root, out)
        return frozenset(out)

    @property
    def max_q_index(self) -> int:
        """Highest 1-based q index referenced, 0 if none."""
        return max((i + 1 for _, n, i in _iter_vars(self.root) if i >= 0),
                   default=0)

    @property
    def uses_u(self) -> bool:
        return any(i == -1 for _, _, i in _iter_vars(self.root))

    def is_polynomial(self) -> bool:
        return _is_polynomial(self.root)

    def derivative(self, q_index: int) -> Optional["ScalarExpr"]:
        """Symbolic d/dq_{q_index+1}, or None when the tree is not polynomial."""
        if not _is_polynomial(self.root):
            return None
        node = _simplify(_diff(self.root, q_index))
        return ScalarExpr(node, to_string(node))

    def compile(self) -> Callable:
        """Build an unchecked numpy closure f(Q, U=None) for hot loops.

        Q has shape (..., d); the result broadcasts against Q[..., 0].
        Domain checking is the job of eval_field; compiled closures assume
        arguments already validated.
        """
        src = _codegen(self.root)
        code = compile(src, "<field>", "eval")
        env = {"_np": np}
        return eval(code, env)  # noqa: S307  (source generated from our own AST)


def parse_expression(src: str) -> ScalarExpr:
    """Parse source into a ScalarExpr.  Raises ExpressionSyntaxError."""
    if not isinstance(src, str):
        raise ExpressionSyntaxError("expression source must be a string", 0)
    root = _Parser(src).parse()
    return ScalarExpr(root, src)


def _iter_vars(node):
    kind = node[0]
    if kind == "var":
        yield node
    elif kind == "neg":
        yield from _iter_vars(node[1])
    elif kind == "bin":
        yield from _iter_vars(node[2])
        yield from _iter_vars(node[3])
    elif kind == "call":
        for a in node[2]:
            yield from _iter_vars(a)


def _collect_vars(node, out):
    for _, name, _ in _iter_vars(node):
        out.add(name)


# ---------------------------------------------------------------------------
# evaluation

def eval_node(node, values, u=None):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        if node[2] == -1:
            if u is None:
                raise EvalDomainError("variable 'u' has no value", "u")
            return u
        idx = node[2]
        if idx >= values.shape[-1]:
            raise EvalDomainError(
                f"variable {node[1]!r} exceeds dimension {values.shape[-1]}",
                node[1])
        return values[..., idx]
    if kind == "neg":
        return -eval_node(node[1], values, u)
    if kind == "bin":
        op = node[1]
        a = eval_node(node[2], values, u)
        b = eval_node(node[3], values, u)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if np.any(b == 0):
                raise EvalDomainError("division by zero", to_string(node))
            return a / b
        # power: reject negative base with non-integer exponent and 0^negative
        bf = np.asarray(b, dtype=float)
        int_exp = np.all(bf == np.floor(bf))
        if not int_exp and np.any(np.asarray(a) < 0):
            raise EvalDomainError(
                "negative base with non-integer exponent", to_string(node))
        if np.any((np.asarray(a) == 0) & (bf < 0)):
            raise EvalDomainError("zero base with negative exponent",
                                  to_string(node))
        return np.power(a, b)
    if kind == "call":
        fname = node[1]
        args = [eval_node(a, values, u) for a in node[2]]
        if fname == "log" and np.any(np.asarray(args[0]) <= 0):
            raise EvalDomainError("log of non-positive value", to_string(node))
        if fname == "sqrt" and np.any(np.asarray(args[0]) < 0):
            raise EvalDomainError("sqrt of negative value", to_string(node))
        return _NUMPY_FUNCS[fname](*args)
    raise AssertionError(f"bad node {node!r}")


def eval_field(f: ScalarExpr, points: np.ndarray, u=None) -> np.ndarray:
    """Checked evaluation of f on points with shape (..., d).

    Returns an array broadcast to the point shape (constants are expanded).
    """
    points = np.asarray(points, dtype=float)
    if points.ndim < 1:
        raise ConfigError("points must have shape (..., d)")
    out = eval_node(f.root, points, u)
    return np.broadcast_to(np.asarray(out, dtype=float),
                           points.shape[:-1]).copy()


# ---------------------------------------------------------------------------
# canonical printing (minimal parentheses; re-parses to the same tree)

def _prec(node):
    kind = node[0]
    if kind in ("num", "var", "call"):
        return 100
    if kind == "neg":
        return _UNARY_BP
    return _LBP[node[1]]


def to_string(node) -> str:
    kind = node[0]
    if kind == "num":
        v = node[1]
        if v == int(v) and abs(v) < 1e16:
            return str(int(v))
        return repr(v)
    if kind == "var":
        return node[1]
    if kind == "neg":
        inner = to_string(node[1])
        if _prec(node[1]) < _UNARY_BP:
            inner = f"({inner})"
        return f"-{inner}"
    if kind == "call":
        return f"{node[1]}(" + ", ".join(to_string(a) for a in node[2]) + ")"
    op = node[1]
    lp = _LBP[op]
    left, right = node[2], node[3]
    ls = to_string(left)
    rs = to_string(right)
    # left child needs parens when looser; for right-assoc '^' the left child
    # needs parens even at equal precedence, and vice versa on the right
    if op == "^":
        if _prec(left) <= lp:
            ls = f"({ls})"
        if _prec(right) < lp:
            rs = f"({rs})"
    else:
        if _prec(left) < lp:
            ls = f"({ls})"
        if _prec(right) <= lp or (right[0] == "neg" and op in "+-*/"):
            rs = f"({rs})"
    return f"{ls} {op} {rs}" if op in "+-" else f"{ls}{op}{rs}"


# ---------------------------------------------------------------------------
# polynomial detection and symbolic derivative

def _is_polynomial(node) -> bool:
    kind = node[0]
    if kind in ("num", "var"):
        return True
    if kind == "neg":
        return _is_polynomial(node[1])
    if kind == "bin":
        op = node[1]
        if op in "+-*":
            return _is_polynomial(node[2]) and _is_polynomial(node[3])
        if op == "/":
            # allow division by a nonzero constant only
            return _is_polynomial(node[2]) and node[3][0] == "num" \
                and node[3][1] != 0
        if op == "^":
            e = node[3]
            return (_is_polynomial(node[2]) and e[0] == "num"
                    and e[1] == int(e[1]) and e[1] >= 0)
        return False
    return False


def _diff(node, qi):
    kind = node[0]
    if kind == "num":
        return ("num", 0.0)
    if kind == "var":
        return ("num", 1.0 if node[2] == qi else 0.0)
    if kind == "neg":
        return ("neg", _diff(node[1], qi))
    op = node[1]
    a, b = node[2], node[3]
    if op in "+-":
        return ("bin", op, _diff(a, qi), _diff(b, qi))
    if op == "*":
        return ("bin", "+",
                ("bin", "*", _diff(a, qi), b),
                ("bin", "*", a, _diff(b, qi)))
    if op == "/":
        return ("bin", "/", _diff(a, qi), b)
    # a^n with integer n >= 0
    n = b[1]
    if n == 0:
        return ("num", 0.0)
    return ("bin", "*",
            ("bin", "*", ("num", float(n)), ("bin", "^", a, ("num", n - 1))),
            _diff(a, qi))


def _simplify(node):
    kind = node[0]
    if kind in ("num", "var"):
        return node
    if kind == "neg":
        a = _simplify(node[1])
        if a[0] == "num":
            return ("num", -a[1])
        return ("neg", a)
    if kind == "call":
        return ("call", node[1], tuple(_simplify(a) for a in node[2]))
    op = node[1]
    a = _simplify(node[2])
    b = _simplify(node[3])
    na, nb = a[0] == "num", b[0] == "num"
    if na and nb:
        try:
            return ("num", float(eval_node(("bin", op, a, b),
                                           np.zeros((1,)))))
        except NumericalError:
            return ("bin", op, a, b)
    if op == "*":
        if (na and a[1] == 0) or (nb and b[1] == 0):
            return ("num", 0.0)
        if na and a[1] == 1:
            return b
        if nb and b[1] == 1:
            return a
    if op == "+":
        if na and a[1] == 0:
            return b
        if nb and b[1] == 0:
            return a
    if op == "-":
        if nb and b[1] == 0:
            return a
        if na and a[1] == 0:
            return ("neg", b)
    if op == "^":
        if nb and b[1] == 1:
            return a
        if nb and b[1] == 0:
            return ("num", 1.0)
    if op == "/" and na and a[1] == 0:
        return ("num", 0.0)
    return ("bin", op, a, b)


# ---------------------------------------------------------------------------
# code generation

def _codegen(root) -> str:
    def emit(node):
        kind = node[0]
        if kind == "num":
            return repr(node[1])
        if kind == "var":
            return "U" if node[2] == -1 else f"Q[..., {node[2]}]"
        if kind == "neg":
            return f"(-{emit(node[1])})"
        if kind == "bin":
            op = node[1]
            if op == "^":
                return f"({emit(node[2])})**({emit(node[3])})"
            return f"({emit(node[2])}{op}{emit(node[3])})"
        fname = node[1]
        np_name = {"min": "minimum", "max": "maximum", "abs": "abs"}.get(
            fname, fname)
        args = ",".join(emit(a) for a in node[2])
        return f"_np.{np_name}({args})"

    return f"lambda Q, U=None: {emit(root)}"


# ---------------------------------------------------------------------------
# numeric gradients of scalar fields

def grad_field(f: ScalarExpr, points: np.ndarray, d: int) -> np.ndarray:
    """Gradient of f at points (..., d), analytic for polynomial trees,
    centered finite differences with step 1e-5*(1+|q|) otherwise."""
    points = np.asarray(points, dtype=float)
    out = np.empty(points.shape[:-1] + (d,))
    if f.is_polynomial():
        for i in range(d):
            df = f.derivative(i)
            out[..., i] = eval_field(df, points)
        return out
    step = 1e-5 * (1.0 + np.linalg.norm(points, axis=-1))
    for i in range(d):
        hp = points.copy()
        hm = points.copy()
        hp[..., i] += step
        hm[..., i] -= step
        out[..., i] = (eval_field(f, hp) - eval_field(f, hm)) / (2.0 * step)
    return out


def fd_derivative(fn: Callable, points: np.ndarray, i: int,
                  rel_step: float = 1e-5) -> np.ndarray:
    """Centered difference of an arbitrary vectorized field along axis i."""
    points = np.asarray(points, dtype=float)
    step = rel_step * (1.0 + np.linalg.norm(points, axis=-1))
    hp = points.copy()
    hm = points.copy()
    hp[..., i] += step
    hm[..., i] -= step
    den = (2.0 * step)
    num = fn(hp) - fn(hm)
    # broadcast over trailing output axes of vector/matrix fields
    return num / den.reshape(den.shape + (1,) * (num.ndim - den.ndim))
