"""Minimal reverse-mode differentiation over a small vector-op vocabulary.

Every primitive records its forward cost and the backward cost it incurs per
differentiable input, measured in elementary floating-point operations:
elementwise ops cost the vector length, a sparse 0-1 product costs the number
of stored nonzeros.  Accumulating adjoints (``+=``) is not counted.

The dispatch helpers (:func:`exp`, :func:`matvec`, :func:`inner`, ...) accept
plain numpy arrays as well as :class:`Var`, so the same cost and dynamics code
runs numerically or on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# cap on the (shifted) exponent; only reached on zero-probability paths
EXP_CAP = 700.0


@dataclass
class Node:
    op: str
    value: np.ndarray
    parents: tuple
    vjp: Callable | None
    bwd_cost: int


@dataclass
class Checkpoint:
    n_nodes: int
    fwd_ops: int
    n_layers: int
    stored: int


@dataclass
class Tape:
    """Ordered record of primitive evaluations."""

    nodes: list = field(default_factory=list)
    fwd_ops: int = 0
    bwd_ops: int = 0
    stored_floats: int = 0
    layers: list = field(default_factory=list)

    def leaf(self, value, name: str = "leaf") -> "Var":
        value = np.array(value, dtype=float)
        return self._push(name, value, (), None, 0, 0)

    def _push(self, op, value, parents, vjp, fwd_cost, bwd_cost) -> "Var":
        self.nodes.append(Node(op, value, parents, vjp, bwd_cost))
        self.fwd_ops += fwd_cost
        self.stored_floats += int(np.size(value))
        return Var(self, len(self.nodes) - 1)

    def record_layer(self, **named) -> None:
        self.layers.append({k: v.index for k, v in named.items() if isinstance(v, Var)})

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(len(self.nodes), self.fwd_ops, len(self.layers), self.stored_floats)

    def truncate(self, cp: Checkpoint) -> None:
        del self.nodes[cp.n_nodes:]
        del self.layers[cp.n_layers:]
        self.fwd_ops = cp.fwd_ops
        self.stored_floats = cp.stored

    def value_of(self, index: int) -> np.ndarray:
        return self.nodes[index].value

    def backward(self, output: "Var", wrt: list) -> list:
        """Adjoints of the scalar ``output`` with respect to each Var in ``wrt``.

        Resets and then accumulates :attr:`bwd_ops`.
        """
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if np.size(output.value) != 1:
            raise ValueError("backward needs a scalar output")
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(output.value)
        self.bwd_ops = 0
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.parents:
                continue
            self.bwd_ops += node.bwd_cost
            for parent, contrib in zip(node.parents, node.vjp(g)):
                if adj[parent] is None:
                    adj[parent] = np.array(contrib, dtype=float)
                else:
                    adj[parent] = adj[parent] + contrib
        out = []
        for v in wrt:
            g = adj[v.index] if v.index < len(adj) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray operators defer to Var

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def size(self) -> int:
        return int(np.size(self.value))

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.nodes[self.index].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, index):
        return part(self, index)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _is_scalar(x) -> bool:
    return not isinstance(x, Var) and np.ndim(x) == 0


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (for scalar or lower-rank operands)."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise primitives
# --------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    out = value(a) + value(b)
    if tape is None:
        return out
    if _is_scalar(a) or _is_scalar(b):
        var = a if isinstance(a, Var) else b
        return tape._push("add", out, (var.index,), lambda g: (g,), out.size, 0)
    parents, shapes = [], []
    for x in (a, b):
        if isinstance(x, Var):
            parents.append(x.index)
            shapes.append(x.shape)
    return tape._push(
        "add", out, tuple(parents),
        lambda g: tuple(_unbroadcast(g, s) for s in shapes), out.size, 0,
    )


def sub(a, b):
    tape = _tape_of(a, b)
    out = value(a) - value(b)
    if tape is None:
        return out
    n = out.size
    if isinstance(a, Var) and isinstance(b, Var):
        sa, sb = a.shape, b.shape
        return tape._push("sub", out, (a.index, b.index),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), n, n)
    if isinstance(a, Var):
        sa = a.shape
        return tape._push("sub", out, (a.index,), lambda g: (_unbroadcast(g, sa),), n, 0)
    sb = b.shape
    return tape._push("sub", out, (b.index,), lambda g: (_unbroadcast(-g, sb),), n, n)


def scale(v, c: float):
    """Multiply by a constant scalar."""
    if not isinstance(v, Var):
        return c * v
    out = c * v.value
    return v.tape._push("scale", out, (v.index,), lambda g: (c * g,), out.size, out.size)


def mul(a, b):
    if _is_scalar(a) and isinstance(b, Var):
        return scale(b, float(a))
    if _is_scalar(b) and isinstance(a, Var):
        return scale(a, float(b))
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va * vb
    if tape is None:
        return out
    n = out.size
    if isinstance(a, Var) and isinstance(b, Var):
        sa, sb = a.shape, b.shape
        return tape._push("mul", out, (a.index, b.index),
                          lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)), n, 2 * n)
    var, const = (a, vb) if isinstance(a, Var) else (b, va)
    s = var.shape
    return tape._push("mul", out, (var.index,), lambda g: (_unbroadcast(g * const, s),), n, n)


def div(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = va / vb
    if tape is None:
        return out
    return _push_div(tape, "div", a, b, va, vb, out)


def _push_div(tape, op, a, b, va, vb, out):
    n = out.size
    parents, cost, fns = [], 0, []
    if isinstance(a, Var):
        sa = a.shape
        parents.append(a.index)
        cost += n
        fns.append(lambda g: _unbroadcast(_safe_ratio(g, vb), sa))
    if isinstance(b, Var):
        sb = b.shape
        parents.append(b.index)
        cost += 2 * n
        fns.append(lambda g: _unbroadcast(-_safe_ratio(g * out, vb), sb))
    return tape._push(op, out, tuple(parents), lambda g: tuple(f(g) for f in fns), n, cost)


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.broadcast_to(np.asarray(den, dtype=float), np.broadcast_shapes(num.shape, np.shape(den)))
    return np.divide(num, den, out=np.zeros(den.shape), where=den != 0)


def safe_div(a, b):
    """``a / b`` with the result (and its derivatives) set to 0 where ``b == 0``."""
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = _safe_ratio(va, vb)
    if tape is None:
        return out
    return _push_div(tape, "safe_div", a, b, va, vb, out)


def exp(v, shift=None):
    """``exp(v - shift)`` with ``shift`` a constant (overflow guard).

    The exponent is capped at ``EXP_CAP``.  The shift is treated as a
    constant, which is exact wherever the caller's result is invariant to it.
    """
    vv = value(v)
    arg = vv if shift is None else vv - shift
    out = np.exp(np.minimum(arg, EXP_CAP))
    if not isinstance(v, Var):
        return out
    n = out.size
    return v.tape._push("exp", out, (v.index,), lambda g: (g * out,), n, n)


def power(v, k):
    """Elementwise ``v ** k`` for a constant exponent (scalar or array)."""
    vv = value(v)
    out = np.power(vv, k)
    if not isinstance(v, Var):
        return out
    n = out.size
    k_arr = np.asarray(k, dtype=float)
    return v.tape._push("power", out, (v.index,),
                        lambda g: (g * k_arr * np.power(vv, k_arr - 1.0),), n, 2 * n)


def inner(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    out = np.array(float(np.dot(va, vb)))
    if tape is None:
        return out
    n = int(np.size(va))
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        fns.append(lambda g: g * vb)
    if isinstance(b, Var):
        parents.append(b.index)
        fns.append(lambda g: g * va)
    return tape._push("inner", out, tuple(parents), lambda g: tuple(f(g) for f in fns), n, n * len(parents))


def vsum(v):
    vv = value(v)
    out = np.array(float(np.sum(vv)))
    if not isinstance(v, Var):
        return out
    n = int(np.size(vv))
    shape = v.shape
    return v.tape._push("sum", out, (v.index,), lambda g: (np.full(shape, float(g)),), n, n)


def part(v, index):
    """Slice of a Var (no arithmetic, no cost)."""
    if not isinstance(v, Var):
        return v[index]
    out = np.array(v.value[index], dtype=float)
    shape = v.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return v.tape._push("part", out, (v.index,), vjp, 0, 0)


def stack(parts):
    """Concatenate 1-D pieces (no arithmetic, no cost)."""
    tape = _tape_of(*parts)
    vals = [np.atleast_1d(value(p)) for p in parts]
    out = np.concatenate(vals)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [len(v) for v in vals])
    parents, slices = [], []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        if isinstance(p, Var):
            parents.append(p.index)
            slices.append(slice(lo, hi))
    return tape._push("stack", out, tuple(parents), lambda g: tuple(g[s] for s in slices), 0, 0)


# --------------------------------------------------------------------------
# sparse 0-1 products
# --------------------------------------------------------------------------


def matvec(m, v):
    """``M @ v`` for an :class:`~stackroute.netcore.Incidence` ``M``."""
    out = m.matvec(value(v))
    if not isinstance(v, Var):
        return out
    return v.tape._push("matvec", out, (v.index,), lambda g: (m.rmatvec(g),), m.nnz, m.nnz)


def rmatvec(m, u):
    """``M.T @ u``."""
    out = m.rmatvec(value(u))
    if not isinstance(u, Var):
        return out
    return u.tape._push("rmatvec", out, (u.index,), lambda g: (m.matvec(g),), m.nnz, m.nnz)
