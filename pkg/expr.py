# expr.py
"""Propensity and observable expressions: parsing, evaluation, derivatives.

Grammar (left associative within a precedence level)::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := '-'* power
    power := atom ('^' integer)*
    atom  := number | func '(' expr (',' expr)* ')' | name | '(' expr ')'

Functions are ``exp`` and ``log`` (one argument) and ``min``/``max`` (two or
more).  Exponents are integer literals only.

Evaluation works on scalars and on numpy batches alike: a state of shape
``(..., n_species)`` and parameters of shape ``(n_params,)`` or
``(..., n_params)`` give a result of the batch shape ``(...)``.  Derivatives
use forward-mode dual numbers carried through the same tree.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence, Union

import numpy as np
import pyparsing as pp

from errors import ExpressionSyntaxError, NumericDomainError, UnknownIdentifierError, ValidationError

pp.ParserElement.enable_packrat()

SPECIES = "species"
PARAM = "param"

_UNARY_FUNCS = ("exp", "log")
_FOLD_FUNCS = ("min", "max")


# --- Syntax tree ---

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    kind: str = ""
    index: int = -1
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    pos: int = field(default=0, compare=False)


Node = Union[Num, Var, Neg, BinOp, Pow, Call]


class _Op:
    """Operator token plus the character offset it was read at."""

    __slots__ = ("symbol", "loc")

    def __init__(self, symbol, loc):
        self.symbol = symbol
        self.loc = loc


# --- Grammar ---

def _fold_binary(tokens):
    items = list(tokens)
    node = items[0]
    for op, rhs in zip(items[1::2], items[2::2]):
        node = BinOp(op.symbol, node, rhs, pos=op.loc)
    return node


def _fold_power(tokens):
    items = list(tokens)
    node = items[0]
    for exponent in items[1:]:
        node = Pow(node, int(exponent))
    return node


def _fold_unary(tokens):
    items = list(tokens)
    node = items[-1]
    for _ in items[:-1]:
        node = Neg(node)
    return node


def _make_call(s, loc, tokens):
    return Call(tokens[0], tuple(tokens[1]), pos=loc)


def _build_grammar():
    expr = pp.Forward()
    lpar, rpar, comma = pp.Suppress("("), pp.Suppress(")"), pp.Suppress(",")

    number = pp.Regex(r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")
    number.set_parse_action(lambda t: Num(float(t[0])))
    name = pp.Regex(r"[A-Za-z_][A-Za-z_0-9]*")
    call = name + lpar + pp.Group(expr + pp.ZeroOrMore(comma + expr)) + rpar
    call.set_parse_action(_make_call)
    symbol = name.copy().set_parse_action(lambda s, loc, t: Var(t[0], pos=loc))
    atom = number | call | symbol | (lpar + expr + rpar)

    integer = pp.Regex(r"-?\d+")
    power = atom + pp.ZeroOrMore(pp.Suppress("^") + integer)
    power.set_parse_action(_fold_power)
    unary = pp.ZeroOrMore(pp.Literal("-")) + power
    unary.set_parse_action(_fold_unary)

    mul_op = pp.one_of("* /").set_parse_action(lambda s, loc, t: _Op(t[0], loc))
    term = unary + pp.ZeroOrMore(mul_op + unary)
    term.set_parse_action(_fold_binary)
    add_op = pp.one_of("+ -").set_parse_action(lambda s, loc, t: _Op(t[0], loc))
    total = term + pp.ZeroOrMore(add_op + term)
    total.set_parse_action(_fold_binary)
    expr <<= total
    return expr


_GRAMMAR = _build_grammar()


def _byte_offset(text, loc):
    return len(text[:loc].encode("utf-8"))


# --- Binding ---

def _symbol_table(species_names, param_names):
    table = {}
    for i, name in enumerate(species_names):
        table[name] = (SPECIES, i)
    for j, name in enumerate(param_names):
        if name in table:
            raise ValidationError(f"'{name}' is declared both as a species and as a parameter")
        table[name] = (PARAM, j)
    return table


def _bind(node, table, text):
    if isinstance(node, Num):
        return node
    if isinstance(node, Var):
        if node.name not in table:
            raise UnknownIdentifierError(node.name, _byte_offset(text, node.pos))
        kind, index = table[node.name]
        return replace(node, kind=kind, index=index)
    if isinstance(node, Neg):
        return Neg(_bind(node.operand, table, text))
    if isinstance(node, BinOp):
        return replace(node, left=_bind(node.left, table, text), right=_bind(node.right, table, text))
    if isinstance(node, Pow):
        return Pow(_bind(node.base, table, text), node.exponent)
    if isinstance(node, Call):
        if node.func in _UNARY_FUNCS:
            if len(node.args) != 1:
                raise ExpressionSyntaxError(f"{node.func}() takes one argument", _byte_offset(text, node.pos))
        elif node.func in _FOLD_FUNCS:
            if len(node.args) < 2:
                raise ExpressionSyntaxError(f"{node.func}() takes two or more arguments", _byte_offset(text, node.pos))
        else:
            raise UnknownIdentifierError(node.func, _byte_offset(text, node.pos))
        return replace(node, args=tuple(_bind(a, table, text) for a in node.args))
    raise TypeError(f"unexpected node {node!r}")


# --- Value evaluation ---

def _compile(node):
    if isinstance(node, Num):
        value = node.value
        return lambda s, p: value
    if isinstance(node, Var):
        i = node.index
        if node.kind == SPECIES:
            return lambda s, p: s[..., i]
        return lambda s, p: p[..., i]
    if isinstance(node, Neg):
        f = _compile(node.operand)
        return lambda s, p: -f(s, p)
    if isinstance(node, BinOp):
        a, b = _compile(node.left), _compile(node.right)
        if node.op == "+":
            return lambda s, p: a(s, p) + b(s, p)
        if node.op == "-":
            return lambda s, p: a(s, p) - b(s, p)
        if node.op == "*":
            return lambda s, p: a(s, p) * b(s, p)
        pos = node.pos

        def divide(s, p):
            num, den = a(s, p), b(s, p)
            if np.any(den == 0):
                raise NumericDomainError("division by zero", pos)
            return num / den
        return divide
    if isinstance(node, Pow):
        f, n = _compile(node.base), node.exponent
        if n >= 0:
            return lambda s, p: f(s, p) ** n

        def inverse_power(s, p):
            base = f(s, p)
            if np.any(base == 0):
                raise NumericDomainError("zero raised to a negative power")
            return np.asarray(base, dtype=float) ** n
        return inverse_power
    if isinstance(node, Call):
        args = [_compile(a) for a in node.args]
        if node.func == "exp":
            g = args[0]
            return lambda s, p: np.exp(g(s, p))
        if node.func == "log":
            g, pos = args[0], node.pos

            def log(s, p):
                v = g(s, p)
                if np.any(v <= 0):
                    raise NumericDomainError("log of a non-positive value", pos)
                return np.log(v)
            return log
        reduce = np.minimum if node.func == "min" else np.maximum

        def fold(s, p):
            out = args[0](s, p)
            for g in args[1:]:
                out = reduce(out, g(s, p))
            return out
        return fold
    raise TypeError(f"unexpected node {node!r}")


# --- Forward-mode dual evaluation ---

class _Seeds:
    """Which symbols carry a unit tangent, and the tangent array shape."""

    __slots__ = ("rows", "n", "batch")

    def __init__(self, rows, batch):
        self.rows = rows
        self.n = len(rows)
        self.batch = batch


def _t_add(ta, tb):
    if ta is None:
        return tb
    if tb is None:
        return ta
    return ta + tb


def _t_scale(t, v):
    return None if t is None else t * v


def _t_neg(t):
    return None if t is None else -t


def _t_pick(mask, ta, tb, seeds):
    if ta is None and tb is None:
        return None
    if ta is None:
        ta = np.zeros((seeds.n,) + seeds.batch)
    if tb is None:
        tb = np.zeros((seeds.n,) + seeds.batch)
    return np.where(mask, ta, tb)


def _compile_dual(node):
    if isinstance(node, Num):
        value = node.value
        return lambda s, p, seeds: (value, None)
    if isinstance(node, Var):
        i, key = node.index, (node.kind, node.index)
        is_species = node.kind == SPECIES

        def var(s, p, seeds):
            v = s[..., i] if is_species else p[..., i]
            row = seeds.rows.get(key)
            if row is None:
                return v, None
            t = np.zeros((seeds.n,) + seeds.batch)
            t[row] = 1.0
            return v, t
        return var
    if isinstance(node, Neg):
        f = _compile_dual(node.operand)

        def neg(s, p, seeds):
            v, t = f(s, p, seeds)
            return -v, _t_neg(t)
        return neg
    if isinstance(node, BinOp):
        a, b, op, pos = _compile_dual(node.left), _compile_dual(node.right), node.op, node.pos

        def binop(s, p, seeds):
            va, ta = a(s, p, seeds)
            vb, tb = b(s, p, seeds)
            if op == "+":
                return va + vb, _t_add(ta, tb)
            if op == "-":
                return va - vb, _t_add(ta, _t_neg(tb))
            if op == "*":
                return va * vb, _t_add(_t_scale(ta, vb), _t_scale(tb, va))
            if np.any(vb == 0):
                raise NumericDomainError("division by zero", pos)
            v = va / vb
            return v, _t_add(_t_scale(ta, 1.0 / vb), _t_scale(tb, -v / vb))
        return binop
    if isinstance(node, Pow):
        f, n = _compile_dual(node.base), node.exponent

        def power(s, p, seeds):
            v, t = f(s, p, seeds)
            if n == 0:
                return np.ones_like(v, dtype=float) if np.ndim(v) else 1.0, None
            if n < 0 and np.any(v == 0):
                raise NumericDomainError("zero raised to a negative power")
            base = np.asarray(v, dtype=float) if n < 0 else v
            return base ** n, _t_scale(t, n * base ** (n - 1))
        return power
    if isinstance(node, Call):
        args = [_compile_dual(a) for a in node.args]
        func, pos = node.func, node.pos
        if func == "exp":
            g = args[0]

            def exp(s, p, seeds):
                v, t = g(s, p, seeds)
                e = np.exp(v)
                return e, _t_scale(t, e)
            return exp
        if func == "log":
            g = args[0]

            def log(s, p, seeds):
                v, t = g(s, p, seeds)
                if np.any(v <= 0):
                    raise NumericDomainError("log of a non-positive value", pos)
                return np.log(v), _t_scale(t, 1.0 / v)
            return log
        take_first = np.less_equal if func == "min" else np.greater_equal

        def fold(s, p, seeds):
            v, t = args[0](s, p, seeds)
            for g in args[1:]:
                vb, tb = g(s, p, seeds)
                # ties follow the earlier argument
                mask = take_first(v, vb)
                v = np.where(mask, v, vb)
                t = _t_pick(mask, t, tb, seeds)
            return v, t
        return fold
    raise TypeError(f"unexpected node {node!r}")


# --- Pretty printing ---

def _precedence(node):
    if isinstance(node, BinOp):
        return 1 if node.op in "+-" else 2
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    return 5


def to_text(node):
    """Render a tree as infix text that parses back to the same tree."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_text(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = to_text(node.operand)
        return f"-({inner})" if _precedence(node.operand) < 3 else f"-{inner}"
    if isinstance(node, Pow):
        base = to_text(node.base)
        if _precedence(node.base) < 5:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    p = _precedence(node)
    left, right = to_text(node.left), to_text(node.right)
    if _precedence(node.left) < p:
        left = f"({left})"
    if _precedence(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def tree_depth(node):
    if isinstance(node, (Num, Var)):
        return 1
    if isinstance(node, Neg):
        return 1 + tree_depth(node.operand)
    if isinstance(node, Pow):
        return 1 + tree_depth(node.base)
    if isinstance(node, BinOp):
        return 1 + max(tree_depth(node.left), tree_depth(node.right))
    return 1 + max(tree_depth(a) for a in node.args)


def _symbols(node):
    if isinstance(node, Var):
        yield node.name
    elif isinstance(node, Neg):
        yield from _symbols(node.operand)
    elif isinstance(node, Pow):
        yield from _symbols(node.base)
    elif isinstance(node, BinOp):
        yield from _symbols(node.left)
        yield from _symbols(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _symbols(a)


# --- Public types ---

@dataclass(frozen=True)
class EvalContext:
    """State and parameter values an expression is evaluated at."""

    state: np.ndarray
    params: np.ndarray

    @classmethod
    def of(cls, state, params):
        return cls(np.asarray(state, dtype=float), np.asarray(params, dtype=float))

    @property
    def batch_shape(self):
        return np.broadcast_shapes(self.state.shape[:-1], self.params.shape[:-1])


@dataclass(frozen=True)
class Expression:
    """A parsed expression bound to species and parameter declarations."""

    text: str
    root: Node
    species_names: tuple
    param_names: tuple

    def __str__(self):
        return to_text(self.root)

    @cached_property
    def _value_fn(self):
        return _compile(self.root)

    @cached_property
    def _dual_fn(self):
        return _compile_dual(self.root)

    @cached_property
    def symbols(self):
        return frozenset(_symbols(self.root))

    @property
    def depth(self):
        return tree_depth(self.root)

    def depends_on(self, name):
        return name in self.symbols

    def value(self, state, params):
        """Evaluate on raw arrays; the result always has the batch shape."""
        shape = np.broadcast_shapes(np.shape(state)[:-1], np.shape(params)[:-1])
        out = self._value_fn(state, params)
        if np.shape(out) != shape:
            out = np.broadcast_to(np.asarray(out, dtype=float), shape).copy()
        return out

    def dual(self, state, params, wrt):
        """Value and tangents with respect to ``wrt`` (names), on raw arrays.

        Returns ``(value, tangents)`` with tangents of shape
        ``(len(wrt),) + batch_shape``.
        """
        table = _symbol_table(self.species_names, self.param_names)
        rows = {}
        for row, name in enumerate(wrt):
            if name not in table:
                raise UnknownIdentifierError(name)
            rows[table[name]] = row
        shape = np.broadcast_shapes(np.shape(state)[:-1], np.shape(params)[:-1])
        seeds = _Seeds(rows, shape)
        v, t = self._dual_fn(state, params, seeds)
        if np.shape(v) != shape:
            v = np.broadcast_to(np.asarray(v, dtype=float), shape).copy()
        if t is None:
            t = np.zeros((len(wrt),) + shape)
        elif t.shape != (len(wrt),) + shape:
            t = np.broadcast_to(t, (len(wrt),) + shape).copy()
        return v, t


def _check_context(e, ctx):
    if ctx.state.shape[-1] != len(e.species_names):
        raise ValueError(f"state has {ctx.state.shape[-1]} entries, expected {len(e.species_names)}")
    if ctx.params.shape[-1] != len(e.param_names):
        raise ValueError(f"params has {ctx.params.shape[-1]} entries, expected {len(e.param_names)}")


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


# --- Operations ---

def parse(text: str, species_names: Sequence[str], param_names: Sequence[str]) -> Expression:
    """Parse ``text`` and bind every identifier to a species or parameter."""
    if not text or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    try:
        root = _GRAMMAR.parse_string(text, parse_all=True)[0]
    except pp.ParseBaseException as exc:
        raise ExpressionSyntaxError(f"cannot parse '{text}'", _byte_offset(text, exc.loc)) from None
    table = _symbol_table(species_names, param_names)
    return Expression(text, _bind(root, table, text), tuple(species_names), tuple(param_names))


def from_tree(root: Node, species_names: Sequence[str], param_names: Sequence[str]) -> Expression:
    """Build an Expression from an unbound tree (used when deriving limit rates)."""
    text = to_text(root)
    table = _symbol_table(species_names, param_names)
    return Expression(text, _bind(root, table, text), tuple(species_names), tuple(param_names))


def evaluate(e: Expression, ctx: EvalContext):
    _check_context(e, ctx)
    return _scalar(e.value(ctx.state, ctx.params))


def derivative_eval(e: Expression, ctx: EvalContext, wrt: str):
    """Exact derivative with respect to one species or parameter name."""
    _check_context(e, ctx)
    _, t = e.dual(ctx.state, ctx.params, (wrt,))
    return _scalar(t[0])


def gradient_eval(e: Expression, ctx: EvalContext, wrt: Sequence[str]):
    """Value plus derivatives with respect to several names in one pass."""
    _check_context(e, ctx)
    v, t = e.dual(ctx.state, ctx.params, tuple(wrt))
    return _scalar(v), t
