"""Define-by-run reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Graph` is a tape: every operation appends one node, so insertion
order is a valid topological order and :func:`backward` simply walks the tape
in reverse. Graphs are meant to be rebuilt on every forward pass.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

LOG_EPS = 1e-8
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "op", "parents", "backward_fn", "graph", "index", "name")

    def __init__(self, value, graph: "Graph", op: str, parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value
        self.graph = graph
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.value.reshape(-1)

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.graph._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


class Graph:
    """Tape of operation nodes. Confined to one thread."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}
        # pre-activation arrays of non-smooth points, consulted by finite_diff_check
        self.kinks: list[tuple[np.ndarray, float]] = []

    def _append(self, t: Tensor) -> Tensor:
        t.index = len(self.nodes)
        self.nodes.append(t)
        return t

    def leaf(self, value, name: Optional[str] = None, requires_grad: bool = True) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        if name is None:
            name = f"leaf{len(self.leaves)}"
        if name in self.leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        t = self._append(Tensor(arr, self, "leaf", requires_grad=requires_grad, name=name))
        self.leaves[name] = t
        return t

    def const(self, value) -> Tensor:
        return self._append(Tensor(np.asarray(value, dtype=np.float64), self, "const"))

    def _lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise ContractError("tensors belong to different graphs")
            return x
        return self.const(x)

    def _record(self, op, value, parents, backward_fn) -> Tensor:
        rg = any(p.requires_grad for p in parents)
        return self._append(Tensor(value, self, op, parents if rg else (),
                                   backward_fn if rg else None, requires_grad=rg))


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise ContractError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return g._record("add", a.value + b.value, (a, b),
                     lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)))


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return g._record("sub", a.value - b.value, (a, b),
                     lambda gr: (_unbroadcast(gr, sa), -_unbroadcast(gr, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    _check_broadcast(a, b, "hadamard")
    av, bv = a.value, b.value
    return g._record("hadamard", av * bv, (a, b),
                     lambda gr: (_unbroadcast(gr * bv, av.shape), _unbroadcast(gr * av, bv.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product; a 1-d operand is a row (left) or column (right) vector, as in numpy."""
    g = _graph_of(a, b)
    a, b = g._lift(a), g._lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul needs vectors or matrices, got {a.shape} and {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        a2 = reshape(a, (1,) + a.shape) if a.ndim == 1 else a
        b2 = reshape(b, b.shape + (1,)) if b.ndim == 1 else b
        if a2.shape[-1] != b2.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
        out = matmul(a2, b2)
        shape = out.shape
        if a.ndim == 1:
            shape = shape[:-2] + shape[-1:]
        if b.ndim == 1:
            shape = shape[:-1]
        return reshape(out, shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def back(gr):
        ga = gr @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ gr
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return g._record("matmul", av @ bv, (a, b), back)


# ----------------------------------------------------------------- unary ops

def scale(a: Tensor, c: float) -> Tensor:
    return a.graph._record("scale", a.value * c, (a,), lambda gr: (gr * c,))


def relu(a: Tensor) -> Tensor:
    x = a.value
    a.graph.kinks.append((x, 0.0))
    mask = x > 0
    return a.graph._record("relu", np.where(mask, x, 0.0), (a,), lambda gr: (gr * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.graph._record("sigmoid", out, (a,), lambda gr: (gr * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = np.exp(x - out)
    return a.graph._record("softplus", out, (a,), lambda gr: (gr * sig,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return a.graph._record("exp", out, (a,), lambda gr: (gr * out,))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped from below at ``eps``."""
    x = a.value
    a.graph.kinks.append((x, eps))
    live = x > eps
    xc = np.where(live, x, eps)
    return a.graph._record("safe-log", np.log(xc), (a,), lambda gr: (np.where(live, gr / xc, 0.0),))


def detach(a: Tensor) -> Tensor:
    return a.graph.const(a.value)


def elementwise(tag: str, a, b=None) -> Tensor:
    """Dispatch by tag: add, hadamard, relu, sigmoid, exp, safe-log, scale."""
    binary = {"add": add, "hadamard": mul}
    unary = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "safe-log": log}
    if tag in binary:
        if b is None:
            raise ContractError(f"{tag} needs two operands")
        a_, b_ = a, b
        if isinstance(a_, Tensor) and isinstance(b_, Tensor) and a_.shape != b_.shape:
            raise ShapeError(f"{tag}: shapes {a_.shape} and {b_.shape} differ")
        return binary[tag](a_, b_)
    if tag in unary:
        return unary[tag](a)
    if tag == "scale":
        return scale(a, float(b))
    raise ContractError(f"unknown elementwise tag {tag!r}")


# ---------------------------------------------------------- shape/reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, shape).copy(),)

    return a.graph._record("sum", np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    if n == 0:
        raise EmptyInputError(f"mean over empty axis of shape {a.shape}")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(m: Tensor, axis: int = -1) -> Tensor:
    """Arithmetic mean of the columns of a ``d x N`` matrix (``axis`` picks the region axis)."""
    if m.shape[axis] == 0:
        raise EmptyInputError("mean_pool of a matrix with no columns")
    return mean(m, axis=axis)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.graph._record("reshape", a.value.reshape(shape), (a,), lambda gr: (gr.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return a.graph._record("transpose", np.swapaxes(a.value, -1, -2), (a,),
                           lambda gr: (np.swapaxes(gr, -1, -2),))


def take(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(gr):
        out = np.zeros(shape)
        np.add.at(out, idx, gr)
        return (out,)

    return a.graph._record("take", a.value[idx], (a,), back)


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {table.shape[0]})")
    return take(table, ids)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    g = _graph_of(*xs)
    xs = [g._lift(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return g._record("concat", np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                     lambda gr: tuple(np.split(gr, sizes, axis=axis)))


# ------------------------------------------------------------ composite ops

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(gr):
        return (p * (gr - (gr * p).sum(axis=axis, keepdims=True)),)

    return a.graph._record("softmax", p, (a,), back)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis."""
    g = _graph_of(u, v)
    u, v = g._lift(u), g._lift(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine: shapes {u.shape} and {v.shape} differ")
    uv, vv = u.value, v.value
    nu = np.linalg.norm(uv, axis=-1)
    nv = np.linalg.norm(vv, axis=-1)
    if np.any(nu < NORM_EPS) or np.any(nv < NORM_EPS):
        bad = np.flatnonzero((nu < NORM_EPS) | (nv < NORM_EPS))
        raise DegenerateVectorError(f"cosine of a near-zero vector at flat index {bad.tolist()}")
    c = (uv * vv).sum(-1) / (nu * nv)
    c = np.clip(c, -1.0, 1.0)

    def back(gr):
        gr = gr[..., None]
        nu_, nv_, c_ = nu[..., None], nv[..., None], c[..., None]
        gu = vv / (nu_ * nv_) - c_ * uv / nu_ ** 2
        gv = uv / (nu_ * nv_) - c_ * vv / nv_ ** 2
        return gr * gu, gr * gv

    return g._record("cosine", c, (u, v), back)


# ------------------------------------------------------------------ backward

def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for every gradient-bearing leaf.

    Leaves with no path to ``loss`` get exact zeros.
    """
    if loss.graph is not graph:
        raise ContractError("loss does not belong to this graph")
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones(())}
    for node in reversed(graph.nodes[: loss.index + 1]):
        gr = grads.get(node.index)
        if gr is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(gr)):
            if not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    return {name: (np.array(grads[t.index], dtype=np.float64).reshape(t.shape)
                   if t.index in grads else np.zeros(t.shape))
            for name, t in graph.leaves.items() if t.requires_grad}


# ------------------------------------------------------- finite differences

def finite_diff_check(f: Callable[[Graph, Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], eps: float = 1e-5,
                      names: Optional[Iterable[str]] = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(graph, leaves)`` builds the scalar loss from leaf tensors. The error
    per coordinate is ``|analytic - numeric| / max(1, |analytic|)``. A
    coordinate is skipped when nudging it moves some relu or safe-log input
    that sits within ``10 * eps`` of its kink, or pushes it across the kink.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(p):
        g = Graph()
        leaves = {k: g.leaf(v, name=k) for k, v in p.items()}
        out = f(g, leaves)
        val = float(out.value)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite loss {val}")
        return g, out, val

    g0, out0, _ = run(params)
    analytic = backward(g0, out0)
    base_kinks = [(x.copy(), k) for x, k in g0.kinks]
    worst = 0.0
    for name in (names if names is not None else params):
        arr = params[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            gp, _, fp = run(params)
            arr[idx] = orig - eps
            gm, _, fm = run(params)
            arr[idx] = orig
            if _near_kink(base_kinks, gp.kinks, gm.kinks, eps):
                continue
            num = (fp - fm) / (2 * eps)
            a = float(analytic[name][idx])
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def _near_kink(base, plus, minus, eps) -> bool:
    for (x0, k), (xp, _), (xm, _) in zip(base, plus, minus):
        if x0.shape != xp.shape:
            return True
        moved = (xp != x0) | (xm != x0)
        if not moved.any():
            continue
        d0, dp, dm = x0[moved] - k, xp[moved] - k, xm[moved] - k
        if np.any(np.abs(d0) <= 10 * eps) or np.any(np.sign(dp) != np.sign(d0)) \
                or np.any(np.sign(dm) != np.sign(d0)):
            return True
    return False
