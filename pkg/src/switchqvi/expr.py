"""Expression strings for drifts, volatilities, generators and costs.

Accepted grammar (nothing else parses)::

    expr   := number | var | expr (+ - * / **) expr | (+|-) expr | ( expr )
            | min(expr, expr, ...) | max(expr, expr, ...) | exp(expr) | log(expr)
    var    := x<i> | y<i> | z<i>       (1-based indices)

Expressions are compiled once into closures over numpy arrays, so a single
call evaluates a whole cloud of points.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ExpressionError

_VAR = re.compile(r"^([xyz])([1-9][0-9]*)$")

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}
_FUNCS = {"exp": (np.exp, 1), "log": (np.log, 1), "min": (np.minimum, None), "max": (np.maximum, None)}

Evaluator = Callable[[dict[str, np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class Expression:
    """A parsed expression.

    ``variables`` maps each letter to the set of 1-based indices the expression
    reads, e.g. ``{"x": {1}, "y": {2}}`` for ``"x1 + y2"``.
    """

    source: str
    variables: dict[str, frozenset[int]]
    _fn: Evaluator = field(repr=False, compare=False)

    def __call__(self, x: np.ndarray, y: np.ndarray | None = None,
                 z: np.ndarray | None = None) -> np.ndarray:
        """Evaluate at ``n`` points; ``x`` is (n, k), ``y`` (n, m), ``z`` (n, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        env = {"x": x, "y": y, "z": z}
        with np.errstate(all="ignore"):
            out = self._fn(env)
        return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()

    def reads(self, letter: str) -> frozenset[int]:
        return self.variables.get(letter, frozenset())

    @property
    def is_constant(self) -> bool:
        return not any(self.variables.values())


def parse(source: str | float | int, limits: dict[str, int] | None = None) -> Expression:
    """Parse ``source`` into an :class:`Expression`.

    ``limits`` bounds the admissible variable indices per letter; a letter
    absent from ``limits`` (or with limit 0) is rejected.  ``None`` accepts any
    index.
    """
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        source = repr(float(source))
    if not isinstance(source, str):
        raise ExpressionError(f"expected a string, got {type(source).__name__}", str(source), 0)
    text = source.strip()
    if not text:
        raise ExpressionError("empty expression", source, 0)
    if "^" in text:
        raise ExpressionError("'^' is not a power operator; use '**'", source, text.index("^"))
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        pos = max((exc.offset or 1) - 1, 0)
        raise ExpressionError(f"syntax error: {exc.msg}", source, pos) from None

    used: dict[str, set[int]] = {"x": set(), "y": set(), "z": set()}

    def fail(node: ast.AST, msg: str):
        raise ExpressionError(msg, text, getattr(node, "col_offset", 0))

    def build(node: ast.AST) -> Evaluator:
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                fail(node, f"unsupported literal {node.value!r}")
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            m = _VAR.match(node.id)
            if m is None:
                fail(node, f"unknown name '{node.id}'")
            letter, idx = m.group(1), int(m.group(2))
            top = None if limits is None else limits.get(letter, 0)
            if top == 0:
                fail(node, f"variable '{node.id}' is not available in this expression")
            if top is not None and idx > top:
                fail(node, f"variable '{node.id}' out of range (allowed {letter}1..{letter}{top})")
            used[letter].add(idx)
            col = idx - 1

            def var(env, letter=letter, col=col, name=node.id):
                arr = env[letter]
                if arr is None:
                    raise ValueError(f"expression reads '{name}' but no {letter}-values were supplied")
                return arr[:, col]
            return var
        if isinstance(node, ast.BinOp):
            op = _BINOPS.get(type(node.op))
            if op is None:
                fail(node, f"operator {type(node.op).__name__} not allowed")
            left, right = build(node.left), build(node.right)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.UnaryOp):
            op = _UNARY.get(type(node.op))
            if op is None:
                fail(node, f"unary operator {type(node.op).__name__} not allowed")
            inner = build(node.operand)
            return lambda env: op(inner(env))
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                fail(node, "only min, max, exp, log may be called")
            if node.keywords:
                fail(node, "keyword arguments not allowed")
            fn, arity = _FUNCS[node.func.id]
            args = [build(a) for a in node.args]
            if arity is not None and len(args) != arity:
                fail(node, f"{node.func.id} takes exactly {arity} argument")
            if arity is None:
                if len(args) < 2:
                    fail(node, f"{node.func.id} needs at least 2 arguments")

                def reduce(env, fn=fn, args=args):
                    out = args[0](env)
                    for a in args[1:]:
                        out = fn(out, a(env))
                    return out
                return reduce
            (arg,) = args
            return lambda env: fn(arg(env))
        fail(node, f"unsupported syntax ({type(node).__name__})")

    fn = build(tree.body)
    return Expression(text, {k: frozenset(v) for k, v in used.items() if v}, fn)


def constant(value: float) -> Expression:
    return parse(repr(float(value)))
