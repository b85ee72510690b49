"""Selection expressions: a small typed language over numeric columns.

Precedence, tightest first: unary minus and calls; ``* /``; ``+ -``;
comparisons; ``!``; ``&&``; ``||``.  Every node is either numeric or
boolean, and the parser rejects ill-typed trees, so evaluation never has to
type-check.

Arithmetic follows IEEE f64 exactly: ``log`` of a non-positive value and
``sqrt`` of a negative value are NaN, and every comparison involving NaN is
false (``!=`` included).
"""

import math
import re
from dataclasses import dataclass, field

import numpy as np

from ..errors import BadRequest

FUNCTIONS = ("abs", "sqrt", "log")
COMPARISONS = ("<", "<=", ">", ">=", "==", "!=")
ARITHMETIC = ("+", "-", "*", "/")

NUM, BOOL = "num", "bool"


class SelectionError(BadRequest):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


# -- tree --------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    pos: int = field(default=0, compare=False, repr=False, kw_only=True)


@dataclass(frozen=True)
class Num(Node):
    value: float
    kind = NUM


@dataclass(frozen=True)
class Col(Node):
    name: str
    kind = NUM


@dataclass(frozen=True)
class Call(Node):
    fn: str
    arg: Node
    kind = NUM


@dataclass(frozen=True)
class Neg(Node):
    arg: Node
    kind = NUM


@dataclass(frozen=True)
class Arith(Node):
    op: str
    left: Node
    right: Node
    kind = NUM


@dataclass(frozen=True)
class Cmp(Node):
    op: str
    left: Node
    right: Node
    kind = BOOL


@dataclass(frozen=True)
class Not(Node):
    arg: Node
    kind = BOOL


@dataclass(frozen=True)
class And(Node):
    left: Node
    right: Node
    kind = BOOL


@dataclass(frozen=True)
class Or(Node):
    left: Node
    right: Node
    kind = BOOL


# -- lexer -------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|!=|&&|\|\||[<>!+\-*/()])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(src):
    tokens = []
    i = 0
    while i < len(src):
        m = _TOKEN_RE.match(src, i)
        if m is None:
            raise SelectionError(f"unexpected character {src[i]!r}", len(src[:i].encode("utf-8")))
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Tok(kind, m.group(), len(src[:i].encode("utf-8"))))
        i = m.end()
    tokens.append(_Tok("eof", "", len(src.encode("utf-8"))))
    return tokens


# -- parser ------------------------------------------------------------------

class _Parser:
    def __init__(self, src):
        self.tokens = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def accept(self, *texts):
        if self.tok.kind == "op" and self.tok.text in texts:
            return self.advance()
        return None

    def expect(self, text):
        if self.accept(text) is None:
            raise self.unexpected(f"expected {text!r}")

    def unexpected(self, what):
        tok = self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return SelectionError(f"{what}, found {found}", tok.pos)

    @staticmethod
    def want(node, kind, context):
        if node.kind != kind:
            raise SelectionError(f"{context} needs a {'numeric' if kind == NUM else 'boolean'} operand", node.pos)
        return node

    def parse(self):
        node = self.or_expr()
        if self.tok.kind != "eof":
            raise self.unexpected("expected operator")
        return node

    def or_expr(self):
        node = self.and_expr()
        while (tok := self.accept("||")) is not None:
            right = self.and_expr()
            node = Or(self.want(node, BOOL, "'||'"), self.want(right, BOOL, "'||'"), pos=tok.pos)
        return node

    def and_expr(self):
        node = self.not_expr()
        while (tok := self.accept("&&")) is not None:
            right = self.not_expr()
            node = And(self.want(node, BOOL, "'&&'"), self.want(right, BOOL, "'&&'"), pos=tok.pos)
        return node

    def not_expr(self):
        tok = self.accept("!")
        if tok is not None:
            return Not(self.want(self.not_expr(), BOOL, "'!'"), pos=tok.pos)
        return self.cmp_expr()

    def cmp_expr(self):
        node = self.add_expr()
        tok = self.accept(*COMPARISONS)
        if tok is not None:
            right = self.add_expr()
            ctx = repr(tok.text)
            node = Cmp(tok.text, self.want(node, NUM, ctx), self.want(right, NUM, ctx), pos=tok.pos)
        return node

    def add_expr(self):
        node = self.mul_expr()
        while (tok := self.accept("+", "-")) is not None:
            right = self.mul_expr()
            ctx = repr(tok.text)
            node = Arith(tok.text, self.want(node, NUM, ctx), self.want(right, NUM, ctx), pos=tok.pos)
        return node

    def mul_expr(self):
        node = self.unary()
        while (tok := self.accept("*", "/")) is not None:
            right = self.unary()
            ctx = repr(tok.text)
            node = Arith(tok.text, self.want(node, NUM, ctx), self.want(right, NUM, ctx), pos=tok.pos)
        return node

    def unary(self):
        tok = self.accept("-")
        if tok is not None:
            return Neg(self.want(self.unary(), NUM, "unary '-'"), pos=tok.pos)
        return self.primary()

    def primary(self):
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            value = float(tok.text)
            if not math.isfinite(value):
                raise SelectionError(f"numeric literal {tok.text} out of range", tok.pos)
            return Num(value, pos=tok.pos)
        if tok.kind == "ident":
            self.advance()
            if tok.text in FUNCTIONS and self.accept("("):
                arg = self.or_expr()
                self.expect(")")
                return Call(tok.text, self.want(arg, NUM, f"{tok.text}()"), pos=tok.pos)
            return Col(tok.text, pos=tok.pos)
        if self.accept("("):
            node = self.or_expr()
            self.expect(")")
            return node
        raise self.unexpected("expected operand")


def parse(src, kind=None):
    """Parse ``src``; with ``kind`` (``"bool"``/``"num"``) also check the result type."""
    if not isinstance(src, str):
        raise BadRequest("expression source must be a string")
    node = _Parser(src).parse()
    if kind is not None and node.kind != kind:
        expected = "boolean selection" if kind == BOOL else "numeric expression"
        raise SelectionError(f"expected a {expected}", 0)
    return node


def parse_selection(src):
    return parse(src, BOOL)


def columns_of(node):
    """Column names referenced by a tree, in first-use order."""
    seen = {}

    def walk(n):
        if isinstance(n, Col):
            seen.setdefault(n.name, n)
        for child in _children(n):
            walk(child)

    walk(node)
    return seen


def _children(n):
    if isinstance(n, (Call, Neg, Not)):
        return (n.arg,)
    if isinstance(n, (Arith, Cmp, And, Or)):
        return (n.left, n.right)
    return ()


def check_columns(node, available):
    for name, col in columns_of(node).items():
        if name not in available:
            raise SelectionError(f"unknown column {name!r}", col.pos)


def to_source(n):
    """Fully parenthesized source text that reparses to an equal tree."""
    if isinstance(n, Num):
        return repr(n.value)
    if isinstance(n, Col):
        return n.name
    if isinstance(n, Call):
        return f"{n.fn}({to_source(n.arg)})"
    if isinstance(n, Neg):
        return f"(-{to_source(n.arg)})"
    if isinstance(n, Not):
        return f"(!{to_source(n.arg)})"
    op = {And: "&&", Or: "||"}.get(type(n), getattr(n, "op", None))
    return f"({to_source(n.left)} {op} {to_source(n.right)})"


# -- row-at-a-time evaluation ------------------------------------------------

def _sqrt(x):
    return math.sqrt(x) if x >= 0 else math.nan


def _log(x):
    return math.log(x) if x > 0 else math.nan


def _div(a, b):
    if b == 0:
        if a != a or a == 0:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)
    return a / b


_SCALAR_FN = {"abs": abs, "sqrt": _sqrt, "log": _log}


def _compare(op, a, b):
    if a != a or b != b:
        return False
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    if op == "==":
        return a == b
    return a != b


def eval_numeric(node, row):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Col):
        try:
            return float(row[node.name])
        except KeyError:
            raise SelectionError(f"unknown column {node.name!r}", node.pos) from None
    if isinstance(node, Neg):
        return -eval_numeric(node.arg, row)
    if isinstance(node, Call):
        return _SCALAR_FN[node.fn](eval_numeric(node.arg, row))
    if isinstance(node, Arith):
        a, b = eval_numeric(node.left, row), eval_numeric(node.right, row)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return _div(a, b)
    raise BadRequest(f"not a numeric expression: {type(node).__name__}")


def eval_selection(node, row):
    if isinstance(node, Cmp):
        return _compare(node.op, eval_numeric(node.left, row), eval_numeric(node.right, row))
    if isinstance(node, Not):
        return not eval_selection(node.arg, row)
    if isinstance(node, And):
        return eval_selection(node.left, row) and eval_selection(node.right, row)
    if isinstance(node, Or):
        return eval_selection(node.left, row) or eval_selection(node.right, row)
    raise BadRequest(f"not a boolean expression: {type(node).__name__}")


# -- columnar evaluation -----------------------------------------------------

def _vlog(x):
    # math.log per element keeps results bit-identical to the row evaluator.
    out = np.full(x.shape, np.nan)
    mask = x > 0
    out[mask] = [math.log(v) for v in x[mask].tolist()]
    return out


_VECTOR_FN = {"abs": np.abs, "sqrt": np.sqrt, "log": _vlog}


def eval_columns(node, columns, n_rows=None):
    """Evaluate over whole columns; returns a float64 or bool array."""
    if n_rows is None:
        n_rows = len(next(iter(columns.values()))) if columns else 0
    with np.errstate(all="ignore"):
        return _veval(node, columns, n_rows)


def _veval(node, columns, n):
    if isinstance(node, Num):
        return np.full(n, node.value)
    if isinstance(node, Col):
        try:
            return np.asarray(columns[node.name], dtype=np.float64)
        except KeyError:
            raise SelectionError(f"unknown column {node.name!r}", node.pos) from None
    if isinstance(node, Neg):
        return -_veval(node.arg, columns, n)
    if isinstance(node, Call):
        return _VECTOR_FN[node.fn](_veval(node.arg, columns, n))
    if isinstance(node, Arith):
        a, b = _veval(node.left, columns, n), _veval(node.right, columns, n)
        return {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}[node.op](a, b)
    if isinstance(node, Cmp):
        a, b = _veval(node.left, columns, n), _veval(node.right, columns, n)
        op = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal,
              "==": np.equal, "!=": np.not_equal}[node.op]
        return op(a, b) & ~np.isnan(a) & ~np.isnan(b)
    if isinstance(node, Not):
        return ~_veval(node.arg, columns, n)
    if isinstance(node, And):
        return _veval(node.left, columns, n) & _veval(node.right, columns, n)
    if isinstance(node, Or):
        return _veval(node.left, columns, n) | _veval(node.right, columns, n)
    raise BadRequest(f"unknown node {type(node).__name__}")
