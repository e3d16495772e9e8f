"""Small reverse-mode differentiation engine over dense numpy arrays.

Expressions are immutable DAGs. Leaves are either named parameters, bound at
evaluation time, or constant arrays. Interior nodes carry an op name and the
operands. ``evaluate`` runs the forward pass, ``gradient`` the reverse pass.

Two precisions are supported: ``"fast"`` (float32) for training and
``"exact"`` (float64) for gradient checks.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray

PRECISIONS = {"fast": np.float32, "exact": np.float64}


class ExprError(Exception):
    """Base class for expression configuration errors."""


class UnboundLeafError(ExprError, KeyError):
    pass


class ShapeError(ExprError, ValueError):
    pass


class NonFiniteError(ExprError, FloatingPointError):
    pass


class Expr:
    __slots__ = ("op", "inputs", "attrs", "__weakref__")

    def __init__(self, op: str, inputs: Sequence["Expr"] = (), attrs: dict | None = None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}

    def __repr__(self) -> str:
        if self.op == "param":
            return f"param({self.attrs['name']!r})"
        if self.op == "const":
            return f"const(shape={self.attrs['value'].shape})"
        return f"{self.op}(<{len(self.inputs)} operands>)"

    # operator sugar keeps model code readable
    def __add__(self, other: "Expr") -> "Expr":
        return add(self, other)

    def __sub__(self, other: "Expr") -> "Expr":
        return sub(self, other)

    def __mul__(self, other: "Expr") -> "Expr":
        return mul(self, other)

    def __matmul__(self, other: "Expr") -> "Expr":
        return matmul(self, other)

    def __neg__(self) -> "Expr":
        return scale(self, -1.0)


# ---------------------------------------------------------------- builders


def param(name: str) -> Expr:
    return Expr("param", attrs={"name": name})


def const(value) -> Expr:
    arr = np.asarray(value, dtype=np.float64)
    return Expr("const", attrs={"value": arr})


def _as_expr(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def add(a, b) -> Expr:
    return Expr("add", (_as_expr(a), _as_expr(b)))


def sub(a, b) -> Expr:
    return Expr("sub", (_as_expr(a), _as_expr(b)))


def mul(a, b) -> Expr:
    return Expr("mul", (_as_expr(a), _as_expr(b)))


def scale(a, c: float) -> Expr:
    return Expr("scale", (_as_expr(a),), {"c": float(c)})


def matmul(a, b) -> Expr:
    return Expr("matmul", (_as_expr(a), _as_expr(b)))


def concat(xs: Sequence, axis: int = -1) -> Expr:
    return Expr("concat", tuple(_as_expr(x) for x in xs), {"axis": axis})


def sigmoid(a) -> Expr:
    return Expr("sigmoid", (_as_expr(a),))


def log_sigmoid(a) -> Expr:
    return Expr("log_sigmoid", (_as_expr(a),))


def log(a) -> Expr:
    return Expr("log", (_as_expr(a),))


def exp(a) -> Expr:
    return Expr("exp", (_as_expr(a),))


def tanh(a) -> Expr:
    return Expr("tanh", (_as_expr(a),))


def cos(a) -> Expr:
    return Expr("cos", (_as_expr(a),))


def leaky_relu(a, slope: float = 0.2) -> Expr:
    return Expr("leaky_relu", (_as_expr(a),), {"slope": float(slope)})


def sum(a, axis: int | None = None) -> Expr:  # noqa: A001 - mirrors numpy naming
    return Expr("sum", (_as_expr(a),), {"axis": axis})


def mean(a, axis: int | None = None) -> Expr:
    return Expr("mean", (_as_expr(a),), {"axis": axis})


def softmax(a, axis: int = -1) -> Expr:
    return Expr("softmax", (_as_expr(a),), {"axis": axis})


def attention(q, k, v, mask: Array | None = None) -> Expr:
    """Single-head scaled dot attention.

    ``q`` is (n, d), ``k`` is (n, m, d), ``v`` is (n, m, e). ``mask`` is an
    optional boolean (n, m) array of valid keys; a row with no valid key
    yields a zero output row.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return Expr("attention", (_as_expr(q), _as_expr(k), _as_expr(v)), {"mask": mask})


def slice_(a, key) -> Expr:
    if not isinstance(key, tuple):
        key = (key,)
    return Expr("slice", (_as_expr(a),), {"key": key})


def take_rows(a, index) -> Expr:
    idx = np.asarray(index, dtype=np.int64)
    return Expr("take_rows", (_as_expr(a),), {"index": idx})


def reshape(a, shape: Sequence[int]) -> Expr:
    return Expr("reshape", (_as_expr(a),), {"shape": tuple(shape)})


def tile_rows(a, n: int) -> Expr:
    """Stack a 1-d array ``n`` times into an (n, k) matrix (explicit bias broadcast)."""
    return Expr("tile_rows", (_as_expr(a),), {"n": int(n)})


def rowdot(a, b) -> Expr:
    return sum(mul(a, b), axis=1)


# ---------------------------------------------------------------- op kernels


def _fail(node: Expr, msg: str) -> ShapeError:
    return ShapeError(f"{node!r}: {msg}")


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_sigmoid(x: Array) -> Array:
    # -softplus(-x) for x >= 0, x - softplus(x) otherwise
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    out[~pos] = x[~pos] - np.log1p(np.exp(x[~pos]))
    return out


def _fwd_add(node, a, b):
    if a.shape != b.shape:
        raise _fail(node, f"add operands {a.shape} vs {b.shape}")
    return a + b


def _fwd_sub(node, a, b):
    if a.shape != b.shape:
        raise _fail(node, f"sub operands {a.shape} vs {b.shape}")
    return a - b


def _fwd_mul(node, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise _fail(node, f"mul operands {a.shape} vs {b.shape} (only scalar broadcast)")
    return a * b


def _fwd_matmul(node, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _fail(node, f"matmul operands {a.shape} @ {b.shape}")
    return a @ b


def _fwd_concat(node, *xs):
    axis = node.attrs["axis"]
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise _fail(node, f"concat {[x.shape for x in xs]}: {exc}") from None


def _fwd_sum(node, a):
    return np.sum(a, axis=node.attrs["axis"])


def _fwd_mean(node, a):
    return np.mean(a, axis=node.attrs["axis"])


def _softmax(a: Array, axis: int) -> Array:
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _attention_weights(node, q, k):
    if q.ndim != 2 or k.ndim != 3 or k.shape[0] != q.shape[0] or k.shape[2] != q.shape[1]:
        raise _fail(node, f"attention q {q.shape} k {k.shape}")
    mask = node.attrs["mask"]
    scores = np.einsum("nd,nmd->nm", q, k) / math.sqrt(q.shape[1])
    if mask is None:
        return _softmax(scores, axis=1)
    if mask.shape != scores.shape:
        raise _fail(node, f"attention mask {mask.shape} vs scores {scores.shape}")
    scores = np.where(mask, scores, -np.inf)
    row_max = np.max(scores, axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(mask, np.exp(scores - row_max), 0.0)
    denom = np.sum(e, axis=1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def _fwd_attention(node, q, k, v):
    if v.ndim != 3 or v.shape[:2] != k.shape[:2]:
        raise _fail(node, f"attention k {k.shape} v {v.shape}")
    w = _attention_weights(node, q, k).astype(q.dtype, copy=False)
    return np.einsum("nm,nme->ne", w, v)


def _fwd_slice(node, a):
    try:
        return a[node.attrs["key"]]
    except IndexError as exc:
        raise _fail(node, str(exc)) from None


def _fwd_take_rows(node, a):
    idx = node.attrs["index"]
    if a.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise _fail(node, f"row index out of range for shape {a.shape}")
    return a[idx]


def _fwd_reshape(node, a):
    shape = node.attrs["shape"]
    if int(np.prod(shape)) != a.size:
        raise _fail(node, f"cannot reshape {a.shape} to {shape}")
    return a.reshape(shape)


def _fwd_tile_rows(node, a):
    if a.ndim != 1:
        raise _fail(node, f"tile_rows expects 1-d input, got {a.shape}")
    return np.broadcast_to(a, (node.attrs["n"], a.shape[0])).copy()


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "scale": lambda node, a: a * a.dtype.type(node.attrs["c"]),
    "matmul": _fwd_matmul,
    "concat": _fwd_concat,
    "sigmoid": lambda node, a: _stable_sigmoid(a),
    "log_sigmoid": lambda node, a: _log_sigmoid(a),
    "log": lambda node, a: np.log(a),
    "exp": lambda node, a: np.exp(a),
    "tanh": lambda node, a: np.tanh(a),
    "cos": lambda node, a: np.cos(a),
    "leaky_relu": lambda node, a: np.where(a > 0, a, a * a.dtype.type(node.attrs["slope"])),
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "softmax": lambda node, a: _softmax(a, node.attrs["axis"]),
    "attention": _fwd_attention,
    "slice": _fwd_slice,
    "take_rows": _fwd_take_rows,
    "reshape": _fwd_reshape,
    "tile_rows": _fwd_tile_rows,
}


def _unreduce(g: Array, shape: tuple, axis) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _bwd_mul(node, g, out, a, b):
    ga = g * b
    gb = g * a
    if a.ndim == 0 and b.ndim != 0:
        ga = np.sum(ga)
    if b.ndim == 0 and a.ndim != 0:
        gb = np.sum(gb)
    return ga, gb


def _bwd_concat(node, g, out, *xs):
    axis = node.attrs["axis"]
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return np.split(g, splits, axis=axis)


def _bwd_mean(node, g, out, a):
    axis = node.attrs["axis"]
    count = a.size if axis is None else a.shape[axis]
    return (_unreduce(g, a.shape, axis) / count,)


def _bwd_softmax(node, g, out, a):
    axis = node.attrs["axis"]
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _bwd_attention(node, g, out, q, k, v):
    w = _attention_weights(node, q, k).astype(q.dtype, copy=False)
    scale_ = 1.0 / math.sqrt(q.shape[1])
    gv = w[:, :, None] * g[:, None, :]
    gw = np.einsum("ne,nme->nm", g, v)
    gs = w * (gw - np.sum(w * gw, axis=1, keepdims=True))
    gq = np.einsum("nm,nmd->nd", gs, k) * scale_
    gk = gs[:, :, None] * q[:, None, :] * scale_
    return gq, gk, gv


def _bwd_slice(node, g, out, a):
    ga = np.zeros_like(a)
    ga[node.attrs["key"]] = g
    return (ga,)


def _bwd_take_rows(node, g, out, a):
    ga = np.zeros_like(a)
    np.add.at(ga, node.attrs["index"], g)
    return (ga,)


_BACKWARD: dict[str, Callable] = {
    "add": lambda node, g, out, a, b: (g, g),
    "sub": lambda node, g, out, a, b: (g, -g),
    "mul": _bwd_mul,
    "scale": lambda node, g, out, a: (g * g.dtype.type(node.attrs["c"]),),
    "matmul": lambda node, g, out, a, b: (g @ b.T, a.T @ g),
    "concat": _bwd_concat,
    "sigmoid": lambda node, g, out, a: (g * out * (1 - out),),
    "log_sigmoid": lambda node, g, out, a: (g * _stable_sigmoid(-a),),
    "log": lambda node, g, out, a: (g / a,),
    "exp": lambda node, g, out, a: (g * out,),
    "tanh": lambda node, g, out, a: (g * (1 - out * out),),
    "cos": lambda node, g, out, a: (-g * np.sin(a),),
    "leaky_relu": lambda node, g, out, a: (np.where(a > 0, g, g * g.dtype.type(node.attrs["slope"])),),
    "sum": lambda node, g, out, a: (_unreduce(g, a.shape, node.attrs["axis"]),),
    "mean": _bwd_mean,
    "softmax": _bwd_softmax,
    "attention": _bwd_attention,
    "slice": _bwd_slice,
    "take_rows": _bwd_take_rows,
    "reshape": lambda node, g, out, a: (g.reshape(a.shape),),
    "tile_rows": lambda node, g, out, a: (np.sum(g, axis=0),),
}


# ---------------------------------------------------------------- traversal


def topological_order(root: Expr) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in reversed(node.inputs):
            if id(child) not in seen:
                stack.append((child, False))
    return order


def _leaf_value(node: Expr, bindings: Mapping[str, Array], dtype) -> Array:
    if node.op == "const":
        return node.attrs["value"].astype(dtype, copy=False)
    name = node.attrs["name"]
    if name not in bindings:
        raise UnboundLeafError(f"{node!r} is not bound")
    return np.asarray(bindings[name]).astype(dtype, copy=False)


def _forward(order: list[Expr], bindings, precision: str) -> dict[int, Array]:
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}")
    dtype = PRECISIONS[precision]
    values: dict[int, Array] = {}
    for node in order:
        if node.op in ("param", "const"):
            values[id(node)] = _leaf_value(node, bindings, dtype)
            continue
        args = [values[id(c)] for c in node.inputs]
        with np.errstate(all="ignore"):
            out = np.asarray(_FORWARD[node.op](node, *args), dtype=dtype)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{node!r} produced non-finite values")
        values[id(node)] = out
    return values


def evaluate(expr: Expr, bindings: Mapping[str, Array] | None = None, precision: str = "fast") -> Array:
    order = topological_order(expr)
    return _forward(order, bindings or {}, precision)[id(expr)]


def value_and_gradient(
    expr: Expr,
    bindings: Mapping[str, Array],
    wrt: Iterable[str],
    precision: str = "fast",
) -> tuple[Array, dict[str, Array]]:
    """Forward value of a scalar expression plus its gradient map."""
    wrt = list(dict.fromkeys(wrt))
    order = topological_order(expr)
    values = _forward(order, bindings, precision)
    root = values[id(expr)]
    if root.size != 1 or root.ndim > 1:
        raise ShapeError(f"{expr!r}: gradient requires a scalar root, got shape {root.shape}")

    wanted = set(wrt)
    live: set[int] = set()
    for node in order:
        if node.op == "param" and node.attrs["name"] in wanted:
            live.add(id(node))
        elif any(id(c) in live for c in node.inputs):
            live.add(id(node))

    dtype = PRECISIONS[precision]
    grads: dict[int, Array] = {id(expr): np.ones_like(root)}
    result = {name: np.zeros(np.shape(bindings[name]), dtype=dtype) for name in wrt if name in bindings}
    missing = [name for name in wrt if name not in bindings]
    if missing:
        raise UnboundLeafError(f"gradient requested for unbound parameters {missing}")

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or id(node) not in live:
            continue
        if node.op == "param":
            result[node.attrs["name"]] += g
            continue
        if node.op == "const":
            continue
        args = [values[id(c)] for c in node.inputs]
        parts = _BACKWARD[node.op](node, g, values[id(node)], *args)
        for child, part in zip(node.inputs, parts):
            if id(child) not in live:
                continue
            part = np.asarray(part, dtype=dtype)
            if id(child) in grads:
                grads[id(child)] = grads[id(child)] + part
            else:
                grads[id(child)] = part
    return root.reshape(()), result


def gradient(expr: Expr, bindings: Mapping[str, Array], wrt: Iterable[str], precision: str = "fast") -> dict[str, Array]:
    return value_and_gradient(expr, bindings, wrt, precision)[1]


def finite_difference_check(
    expr: Expr,
    bindings: Mapping[str, Array],
    wrt: Iterable[str],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Runs in exact precision. ``max_entries`` caps how many entries per
    parameter are probed (sampled without replacement); ``None`` probes all.
    ``floor`` bounds the denominator from below, so entries whose gradient is
    smaller than the round-off of a central difference do not dominate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    analytic = gradient(expr, base, wrt, precision="exact")
    order = topological_order(expr)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, grad in analytic.items():
        flat = base[name].reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(_forward(order, base, "exact")[id(expr)])
            flat[i] = orig - step
            f_minus = float(_forward(order, base, "exact")[id(expr)])
            flat[i] = orig
            central = (f_plus - f_minus) / (2 * step)
            a = float(grad.reshape(-1)[i])
            err = abs(a - central) / max(abs(a), abs(central), floor)
            worst = max(worst, err)
    return worst
