"""Minimal reverse-mode automatic differentiation over numpy arrays.

A tape is built implicitly: every operation that touches at least one
:class:`Var` returns a new :class:`Var` holding the numpy result plus a
closure that propagates the output gradient to its parents.  Operations
called on plain ndarrays bypass the tape entirely and return ndarrays,
so the same numerical code serves both differentiable and plain paths.

Only what the network needs is implemented: broadcast arithmetic,
n-operand einsum, concatenate/split, reshape, reductions, a few smooth
nonlinearities and an integer-index gather.
"""

from __future__ import annotations

import string

import numpy as np

__all__ = [
    "Var",
    "is_var",
    "value_of",
    "add",
    "sub",
    "mul",
    "einsum",
    "concat",
    "split",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "sqrt",
    "silu",
    "gather_nodes",
]


class Var:
    """Node of the tape: a value, an accumulated gradient and a backward rule."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(p for p in parents if isinstance(p, Var))
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def backward(self, seed=None):
        """Accumulate gradients of this node w.r.t. every reachable Var."""
        if seed is None:
            seed = np.ones_like(self.value)
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in order:
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if is_var(other):
            raise TypeError("division by a Var is not supported; multiply by an inverse")
        return mul(self, 1.0 / np.asarray(other))

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _toposort(root: Var) -> list[Var]:
    # iterative DFS; returns reverse topological order (root first)
    seen = set()
    order: list[Var] = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _accumulate(node: Var, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (is_var(a) or is_var(b)):
        return out

    def backward(g):
        if is_var(a):
            _accumulate(a, _unbroadcast(g, av.shape))
        if is_var(b):
            _accumulate(b, _unbroadcast(g, bv.shape))

    return Var(out, (a, b), backward)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (is_var(a) or is_var(b)):
        return out

    def backward(g):
        if is_var(a):
            _accumulate(a, _unbroadcast(g, av.shape))
        if is_var(b):
            _accumulate(b, _unbroadcast(-g, bv.shape))

    return Var(out, (a, b), backward)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (is_var(a) or is_var(b)):
        return out

    def backward(g):
        if is_var(a):
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if is_var(b):
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return Var(out, (a, b), backward)


def _expand_ellipsis(spec: str, operands) -> str:
    """Rewrite '...' into concrete letters; all expansions must agree."""
    if "..." not in spec:
        return spec
    lhs, rhs = spec.split("->")
    in_specs = lhs.split(",")
    used = set(spec.replace(".", "").replace(",", "").replace("->", ""))
    pool = [c for c in string.ascii_uppercase + string.ascii_lowercase if c not in used]
    width = None
    for sub_spec, op in zip(in_specs, operands):
        if "..." in sub_spec:
            explicit = len(sub_spec) - 3
            w = value_of(op).ndim - explicit
            if w < 0:
                raise ValueError(f"operand rank too small for einsum spec {spec!r}")
            if width is None:
                width = w
            elif width != w:
                raise ValueError("ellipsis ranks differ between einsum operands")
    assert width is not None
    letters = "".join(pool[:width])
    out = ",".join(s.replace("...", letters) for s in in_specs)
    return out + "->" + rhs.replace("...", letters)


def einsum(spec: str, *operands):
    """n-operand einsum; differentiable in every Var operand.

    Each index letter may appear at most once per operand, and every
    operand index must also appear in the output or another operand
    (no solo summed indices — use reduce_sum for those).
    """
    values = [value_of(op) for op in operands]
    full = _expand_ellipsis(spec, operands)
    out = np.einsum(full, *values)
    if not any(is_var(op) for op in operands):
        return out

    lhs, out_spec = full.split("->")
    in_specs = lhs.split(",")

    def backward(g):
        for i, op in enumerate(operands):
            if not is_var(op):
                continue
            others = [values[j] for j in range(len(values)) if j != i]
            other_specs = [in_specs[j] for j in range(len(values)) if j != i]
            g_spec = ",".join([out_spec] + other_specs) + "->" + in_specs[i]
            _accumulate(op, np.einsum(g_spec, g, *others))

    return Var(out, operands, backward)


def concat(parts, axis: int):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if not any(is_var(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for i, p in enumerate(parts):
            if is_var(p):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offsets[i], offsets[i + 1])
                _accumulate(p, g[tuple(idx)])

    return Var(out, tuple(parts), backward)


def split(x, sizes, axis: int):
    """Split along `axis` into chunks of the given sizes."""
    xv = value_of(x)
    offsets = np.cumsum([0] + list(sizes))
    if offsets[-1] != xv.shape[axis]:
        raise ValueError("split sizes do not cover the axis")
    pieces = []
    for i in range(len(sizes)):
        idx = [slice(None)] * xv.ndim
        idx[axis] = slice(offsets[i], offsets[i + 1])
        idx = tuple(idx)
        piece = xv[idx]
        if is_var(x):
            def backward(g, idx=idx):
                full = np.zeros_like(xv)
                full[idx] = g
                _accumulate(x, full)

            piece = Var(piece, (x,), backward)
        pieces.append(piece)
    return pieces


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not is_var(x):
        return out

    def backward(g):
        _accumulate(x, g.reshape(xv.shape))

    return Var(out, (x,), backward)


def reduce_sum(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if not is_var(x):
        return out

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, xv.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, xv.shape).copy())

    return Var(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    if axis is None:
        n = xv.size
    else:
        n = xv.shape[axis]
    return reduce_sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def sqrt(x):
    xv = value_of(x)
    out = np.sqrt(xv)
    if not is_var(x):
        return out

    def backward(g):
        _accumulate(x, g * (0.5 / out))

    return Var(out, (x,), backward)


def silu(x):
    """x * sigmoid(x); the smooth activation used on scalar channels."""
    xv = value_of(x)
    with np.errstate(over="ignore"):
        sig = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))),
                       np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))
    out = xv * sig
    if not is_var(x):
        return out

    def backward(g):
        _accumulate(x, g * (sig * (1.0 + xv * (1.0 - sig))))

    return Var(out, (x,), backward)


def gather_nodes(x, idx: np.ndarray):
    """Gather node features x[b, idx[b, n, k]] -> (B, n, k, ...).

    `x` has shape (B, N, ...); `idx` is an integer array (B, n, k).
    """
    xv = value_of(x)
    b_idx = np.arange(xv.shape[0])[:, None, None]
    out = xv[b_idx, idx]
    if not is_var(x):
        return out

    def backward(g):
        full = np.zeros_like(xv)
        np.add.at(full, (b_idx, idx), g)
        _accumulate(x, full)

    return Var(out, (x,), backward)


def matmul_left(w, x):
    """w @ x for a 2D weight (o, i) against (..., i, m) features.

    Much cheaper than the equivalent einsum on small operands.
    """
    wv, xv = value_of(w), value_of(x)
    out = np.matmul(wv, xv)
    if not (is_var(w) or is_var(x)):
        return out

    def backward(g):
        if is_var(w):
            gw = np.matmul(g, np.swapaxes(xv, -1, -2))
            if gw.ndim > 2:
                gw = gw.sum(axis=tuple(range(gw.ndim - 2)))
            _accumulate(w, gw)
        if is_var(x):
            _accumulate(x, np.matmul(wv.T, g))

    return Var(out, (w, x), backward)


def matmul_pair(a, b):
    """Broadcasted matrix product of (..., n, p) @ (..., p, r)."""
    av, bv = value_of(a), value_of(b)
    out = np.matmul(av, bv)
    if not (is_var(a) or is_var(b)):
        return out

    def backward(g):
        if is_var(a):
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape))
        if is_var(b):
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape))

    return Var(out, (a, b), backward)


def affine_vec(x, w, b):
    """x @ w.T + b for (..., i) vectors and a 2D weight (o, i)."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = np.matmul(xv, wv.T) + bv
    if not (is_var(x) or is_var(w) or is_var(b)):
        return out

    def backward(g):
        if is_var(x):
            _accumulate(x, np.matmul(g, wv))
        if is_var(w):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = xv.reshape(-1, xv.shape[-1])
            _accumulate(w, g2.T @ x2)
        if is_var(b):
            _accumulate(b, _unbroadcast(g, bv.shape))

    return Var(out, (x, w, b), backward)


def take_rows(table, idx: np.ndarray):
    """Row lookup table[idx] for an integer index array of any shape."""
    tv = value_of(table)
    out = tv[idx]
    if not is_var(table):
        return out

    def backward(g):
        full = np.zeros_like(tv)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return Var(out, (table,), backward)
