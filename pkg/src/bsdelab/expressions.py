"""A small closed expression grammar for config-defined generators.

Grammar (Python syntax, evaluated elementwise on NumPy arrays)::

    expr   := number | name | expr op expr | -expr | +expr | call
    op     := + | - | * | / | **
    call   := abs(expr) | sqrt(expr) | min(expr, expr, ...) | max(expr, expr, ...)

Only names supplied by the caller are visible.  Nothing else (attributes,
subscripts, comprehensions, keyword arguments) is accepted.
"""

from __future__ import annotations

import ast
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = ["ExpressionError", "compile_expression"]


class ExpressionError(ValueError):
    pass


def _vmin(*args):
    out = args[0]
    for a in args[1:]:
        out = np.minimum(out, a)
    return out


def _vmax(*args):
    out = args[0]
    for a in args[1:]:
        out = np.maximum(out, a)
    return out


_FUNCS = {"abs": np.abs, "sqrt": np.sqrt, "min": _vmin, "max": _vmax}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def compile_expression(source: str, names: Iterable[str]) -> Callable[[Mapping[str, np.ndarray]], np.ndarray]:
    """Parse ``source`` and return ``f(env) -> array``.

    Raises
    ------
    ExpressionError
        On syntax outside the grammar or unknown names.
    """
    allowed = frozenset(names)
    try:
        tree = ast.parse(str(source), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {source!r}: {exc.msg}") from None

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            c = float(node.value)
            return lambda env: c
        if isinstance(node, ast.Name):
            if node.id not in allowed:
                raise ExpressionError(f"unknown name {node.id!r} in {source!r}; allowed: {sorted(allowed)}")
            key = node.id
            return lambda env: env[key]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            fn = _BINOPS[type(node.op)]
            lhs, rhs = build(node.left), build(node.right)
            return lambda env: fn(lhs(env), rhs(env))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = build(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: np.negative(inner(env))
            return inner
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if node.keywords or not node.args:
                raise ExpressionError(f"bad call to {node.func.id} in {source!r}")
            fn = _FUNCS[node.func.id]
            if fn in (np.abs, np.sqrt) and len(node.args) != 1:
                raise ExpressionError(f"{node.func.id} takes one argument in {source!r}")
            args = [build(a) for a in node.args]
            return lambda env: fn(*(a(env) for a in args))
        raise ExpressionError(f"unsupported syntax {ast.dump(node)[:60]} in {source!r}")

    fn = build(tree)
    return fn
