from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Mapping, Optional, Sequence, Tuple, Union

import lark
import numpy as np

from reckit.errors import EvalError, SpecError

Number = Union[float, np.ndarray]

grammar = r"""
?start: sum

?sum: product
    | sum "+" product   -> add
    | sum "-" product   -> sub

?product: unary
    | product "*" unary -> mul
    | product "/" unary -> div

?unary: power
    | "-" unary         -> neg
    | "+" unary

?power: atom
    | atom "^" unary    -> pow

?atom: NUMBER           -> number
    | NAME "(" [sum ("," sum)*] ")" -> call
    | NAME              -> var
    | "(" sum ")"

%import common.CNAME -> NAME
%import common.NUMBER
%import common.WS_INLINE
%ignore WS_INLINE
"""

FUNCTIONS: Dict[str, Tuple[int, Callable[..., Number]]] = {
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "tan": (1, np.tan),
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "atan": (1, np.arctan),
    "tanh": (1, np.tanh),
    "atan2": (2, np.arctan2),
    "hypot": (2, np.hypot),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

CONSTANTS = {"pi": math.pi, "e": math.e}


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * / ^
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    args: Tuple["Node", ...]


Node = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class Expr:
    source: str
    root: Node
    names: FrozenSet[str]

    def __call__(self, env: Mapping[str, Number]) -> Number:
        return evaluate(self.root, env)

    def __str__(self) -> str:
        return render(self.root)


_OPS = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


class _Build(lark.Transformer):
    def number(self, children):
        return Num(float(children[0]))

    def var(self, children):
        name = str(children[0])
        if name in CONSTANTS:
            return Num(CONSTANTS[name])
        return Var(name)

    def neg(self, children):
        return Neg(children[0])

    def call(self, children):
        name = str(children[0])
        args = tuple(c for c in children[1:] if c is not None)
        if name not in FUNCTIONS:
            tok = children[0]
            raise SpecError(f"unknown function {name!r}", getattr(tok, "line", None), getattr(tok, "column", None))
        arity = FUNCTIONS[name][0]
        if len(args) != arity:
            tok = children[0]
            raise SpecError(f"{name} takes {arity} argument(s), got {len(args)}", getattr(tok, "line", None), getattr(tok, "column", None))
        return Call(name, args)

    def __default__(self, data, children, meta):
        if data in _OPS:
            return BinOp(_OPS[data], children[0], children[1])
        return super().__default__(data, children, meta)


_parser = lark.Lark(grammar, parser="lalr", maybe_placeholders=True)


def _names(node: Node) -> FrozenSet[str]:
    if isinstance(node, Var):
        return frozenset((node.name,))
    if isinstance(node, Neg):
        return _names(node.arg)
    if isinstance(node, BinOp):
        return _names(node.left) | _names(node.right)
    if isinstance(node, Call):
        out: FrozenSet[str] = frozenset()
        for a in node.args:
            out |= _names(a)
        return out
    return frozenset()


def parse_expr(text: str, variables: Optional[Sequence[str]] = None, line: Optional[int] = None, key: str = "") -> Expr:
    """Parse an arithmetic expression; `variables` closes the set of free names."""
    try:
        tree = _parser.parse(text)
        root = _Build().transform(tree)
    except lark.exceptions.VisitError as exc:
        if isinstance(exc.orig_exc, SpecError):
            raise SpecError(exc.orig_exc.message, line or exc.orig_exc.line, exc.orig_exc.col, key) from None
        raise
    except lark.exceptions.UnexpectedInput as exc:
        raise SpecError(f"bad expression {text!r}", line or exc.line, exc.column, key) from None
    names = _names(root)
    if variables is not None:
        unknown = sorted(names - set(variables))
        if unknown:
            raise SpecError(f"unknown variable {unknown[0]!r} in {text!r}", line, None, key)
    return Expr(text, root, names)


def evaluate(node: Node, env: Mapping[str, Number]) -> Number:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Neg):
        return -evaluate(node.arg, env)
    if isinstance(node, Call):
        fn = FUNCTIONS[node.fn][1]
        return fn(*(evaluate(a, env) for a in node.args))
    a, b = evaluate(node.left, env), evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        if np.any(np.asarray(b) == 0.0):
            raise EvalError("division by zero")
        return a / b
    return np.power(a, b)


def eval_expr(e: Expr, env: Mapping[str, float]) -> float:
    """IEEE-double value of e; non-finite results from finite inputs are errors."""
    with np.errstate(all="ignore"):
        v = float(evaluate(e.root, env))
    if not math.isfinite(v) and all(math.isfinite(float(x)) for x in env.values()):
        raise EvalError(f"non-finite value of {e.source!r}")
    return v


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def render(node: Node, parent: int = 0) -> str:
    """Canonical text, parenthesized only where precedence needs it."""
    if isinstance(node, Num):
        text = repr(node.value)
        return f"({text})" if node.value < 0 else text
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(render(a) for a in node.args)})"
    if isinstance(node, Neg):
        text = f"-{render(node.arg, 3)}"
        return f"({text})" if parent >= 3 else text
    p = _PREC[node.op]
    if node.op == "^":
        text = f"{render(node.left, 5)}^{render(node.right, 3)}"
    else:
        text = f"{render(node.left, p)} {node.op} {render(node.right, p + 1)}"
    return f"({text})" if p < parent else text


def coordinate_names(dim: int) -> Tuple[str, ...]:
    return tuple(f"x{i + 1}" for i in range(dim))


def _env(pts: np.ndarray, t: Optional[float] = None) -> Dict[str, Number]:
    env: Dict[str, Number] = {name: pts[:, i] for i, name in enumerate(coordinate_names(pts.shape[1]))}
    if t is not None:
        env["t"] = t
    return env


def _column(value: Number, count: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (count,)).astype(float)


def compile_field(exprs: Sequence[Expr]) -> Callable[[np.ndarray], np.ndarray]:
    """Vector field p ↦ (e_1(p), ..., e_d(p)) over a batch of points."""
    dim = len(exprs)

    def field(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, dim)
        env = _env(pts)
        with np.errstate(all="ignore"):
            return np.stack([_column(evaluate(e.root, env), pts.shape[0]) for e in exprs], axis=1)

    return field


def compile_flow(exprs: Sequence[Expr]) -> Callable[[float, np.ndarray], np.ndarray]:
    """Closed-form φ(t, x) from one expression per coordinate in t and x1..xd."""
    dim = len(exprs)

    def phi(t: float, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, dim)
        env = _env(pts, t)
        with np.errstate(all="ignore"):
            return np.stack([_column(evaluate(e.root, env), pts.shape[0]) for e in exprs], axis=1)

    return phi


def compile_scalar(expr: Expr, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    def fn(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, dim)
        with np.errstate(all="ignore"):
            return _column(evaluate(expr.root, _env(pts)), pts.shape[0])

    return fn
