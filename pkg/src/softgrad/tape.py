"""Reverse-mode automatic differentiation over float64 arrays.

Every operation in this module accepts either :class:`TapeVar` instances or
plain numpy arrays / scalars.  When no argument is a ``TapeVar`` the op is a
thin wrapper over numpy and returns an ``ndarray``; this lets the physics and
network code run untaped for evaluation and finite-difference oracles.

Ops that see at least one ``TapeVar`` append a node to the owning
:class:`TapeGraph` holding a vector-Jacobian product closure.  Nodes are
appended in execution order, so the reverse sweep in :meth:`TapeGraph.backward`
is a single pass over the node list.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_SVD_DENOM_EPS = 1e-9


class DomainError(ValueError):
    """Raised when an op is evaluated outside its mathematical domain."""


class NonDeterminismError(RuntimeError):
    """A checkpointed segment replayed to different exit values."""


class TapeVar:
    """A float64 array recorded on a :class:`TapeGraph`."""

    __slots__ = ("values", "node_id", "requires_grad", "graph", "name")
    __array_ufunc__ = None  # make ``ndarray op TapeVar`` dispatch to us

    def __init__(self, values, node_id, requires_grad, graph, name=None):
        self.values = values
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.graph = graph
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"TapeVar#{self.node_id}{tag}(shape={self.values.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    outputs: tuple
    vjp: Callable


@dataclass
class TapeStats:
    peak_nodes: int = 0
    replays: int = 0


class Gradients:
    """Gradient map returned by :meth:`TapeGraph.backward`."""

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, TapeVar]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, var: TapeVar) -> np.ndarray:
        if var.node_id not in self._leaves:
            raise KeyError(f"{var!r} is not a requires_grad leaf of this graph")
        g = self._grads.get(var.node_id)
        return np.zeros_like(var.values) if g is None else g

    def __contains__(self, var):
        return var.node_id in self._leaves

    def __len__(self):
        return len(self._leaves)


class TapeGraph:
    """Append-only record of primitive ops.

    One graph belongs to one worker; a fresh graph is built per training
    horizon and discarded after its backward pass.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self.stats = TapeStats()
        self._ids = itertools.count()
        self._leaves: dict[int, TapeVar] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, values, requires_grad: bool = True, name: str | None = None) -> TapeVar:
        v = TapeVar(np.array(values, dtype=np.float64), next(self._ids), requires_grad, self, name)
        if requires_grad:
            self._leaves[v.node_id] = v
        return v

    def const(self, values, name: str | None = None) -> TapeVar:
        return self.leaf(values, requires_grad=False, name=name)

    def _new_var(self, values, requires_grad):
        return TapeVar(values, next(self._ids), requires_grad, self)

    def _append(self, node):
        self.nodes.append(node)
        n = len(self.nodes)
        if n > self.stats.peak_nodes:
            self.stats.peak_nodes = n

    # -- reverse sweep -------------------------------------------------------

    def backward(self, root: TapeVar) -> Gradients:
        if root.graph is not self:
            raise ValueError("root belongs to a different TapeGraph")
        if root.values.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.values.shape}")
        adj = self._backprop({root.node_id: np.ones_like(root.values)})
        return Gradients({k: adj[k] for k in self._leaves if k in adj}, dict(self._leaves))

    def vjp(self, outputs: Sequence[TapeVar], cotangents: Sequence[np.ndarray],
            wrt: Sequence[TapeVar]) -> list[np.ndarray]:
        """Vector-Jacobian product of ``outputs`` seeded with ``cotangents``."""
        seeds = {}
        for o, g in zip(outputs, cotangents):
            if g is None or not o.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            seeds[o.node_id] = seeds[o.node_id] + g if o.node_id in seeds else g
        adj = self._backprop(seeds)
        return [adj.get(w.node_id, np.zeros_like(w.values)) if w.requires_grad
                else np.zeros_like(w.values) for w in wrt]

    def _backprop(self, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        adj = dict(seeds)
        for node in reversed(self.nodes):
            gouts = [adj.get(o.node_id) for o in node.outputs]
            if all(g is None for g in gouts):
                continue
            gin = node.vjp(gouts[0] if len(gouts) == 1 else gouts)
            for x, g in zip(node.inputs, gin):
                if g is None or not isinstance(x, TapeVar) or not x.requires_grad:
                    continue
                prev = adj.get(x.node_id)
                adj[x.node_id] = g if prev is None else prev + g
        return adj

    # -- recompute-on-backward ------------------------------------------------

    def checkpoint(self, fn: Callable, inputs: Sequence) -> tuple[TapeVar, ...]:
        """Run ``fn(*inputs)`` without retaining its intermediates.

        ``fn`` must be a pure, deterministic function of its explicit inputs
        that returns a sequence of arrays.  The forward pass runs untaped;
        during backward the segment is replayed on a private graph and its
        local reverse sweep is chained onto the outer adjoints.
        """
        seg = CheckpointSegment.capture(self, fn, inputs)
        return seg.exits


@dataclass
class CheckpointSegment:
    captured_inputs: list
    forward_fn: Callable
    boundary_ids: tuple
    exit_values: list = field(repr=False)
    exits: tuple = ()

    @classmethod
    def capture(cls, graph: TapeGraph, fn, inputs):
        ins = []
        for x in inputs:
            if isinstance(x, TapeVar) and x.graph is not graph:
                raise ValueError("checkpoint inputs belong to a different TapeGraph")
            ins.append(x)
        captured = [x.values if isinstance(x, TapeVar) else np.asarray(x, dtype=np.float64)
                    for x in ins]
        outs = fn(*captured)
        if isinstance(outs, np.ndarray) or np.isscalar(outs):
            raise TypeError("checkpointed function must return a sequence of arrays")
        exit_values = [np.array(o, dtype=np.float64) for o in outs]
        needs = any(isinstance(x, TapeVar) and x.requires_grad for x in ins)
        exits = tuple(graph._new_var(v, needs) for v in exit_values)
        seg = cls(captured, fn, (tuple(x.node_id for x in ins if isinstance(x, TapeVar)),
                                 tuple(e.node_id for e in exits)), exit_values, exits)
        if needs:
            graph._append(_Node("checkpoint", tuple(ins), exits, seg._replay_vjp(graph, ins)))
        return seg

    def replay(self):
        sub = TapeGraph(check_finite=False)
        leaves = [sub.leaf(v) for v in self.captured_inputs]
        outs = self.forward_fn(*leaves)
        outs = [o if isinstance(o, TapeVar) else sub.const(o) for o in outs]
        for k, (o, ref) in enumerate(zip(outs, self.exit_values)):
            if o.values.shape != ref.shape or o.values.tobytes() != ref.tobytes():
                raise NonDeterminismError(f"checkpoint replay diverged at exit {k}")
        return sub, leaves, outs

    def _replay_vjp(self, outer: TapeGraph, ins):
        def vjp(gouts):
            if len(self.exits) == 1:
                gouts = [gouts]
            sub, leaves, outs = self.replay()
            outer.stats.replays += 1
            outer.stats.peak_nodes = max(outer.stats.peak_nodes, len(outer.nodes) + len(sub.nodes))
            return sub.vjp(outs, gouts, leaves)
        return vjp


# ---------------------------------------------------------------------------
# recording helpers

def _graph_of(args):
    g = None
    for a in args:
        if isinstance(a, TapeVar):
            if g is None:
                g = a.graph
            elif a.graph is not g:
                raise ValueError("inputs belong to different TapeGraphs")
    return g


def _val(x):
    return x.values if isinstance(x, TapeVar) else x


def _record(kind, inputs, out, vjp, graph=None):
    graph = graph or _graph_of(inputs)
    out = np.asarray(out, dtype=np.float64)
    if graph.check_finite and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from {kind}")
    needs = any(isinstance(x, TapeVar) and x.requires_grad for x in inputs)
    var = graph._new_var(out, needs)
    if needs:
        graph._append(_Node(kind, tuple(inputs), (var,), vjp))
    return var


def _record_multi(kind, inputs, outs, vjp, graph=None):
    graph = graph or _graph_of(inputs)
    needs = any(isinstance(x, TapeVar) and x.requires_grad for x in inputs)
    vars_ = tuple(graph._new_var(np.asarray(o, dtype=np.float64), needs) for o in outs)
    if needs:
        graph._append(_Node(kind, tuple(inputs), vars_, vjp))
    return vars_


def _taped(*args):
    return any(isinstance(a, TapeVar) for a in args)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(_val(x))


def value(x):
    """Plain numpy value of a TapeVar or array."""
    return np.asarray(_val(x), dtype=np.float64)


def stop_gradient(x):
    if not isinstance(x, TapeVar):
        return x
    return x.graph._new_var(x.values, False)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    out = np.add(_val(a), _val(b))
    if not _taped(a, b):
        return out
    sa, sb = _shape(a), _shape(b)
    return _record("add", (a, b), out, lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    out = np.subtract(_val(a), _val(b))
    if not _taped(a, b):
        return out
    sa, sb = _shape(a), _shape(b)
    return _record("sub", (a, b), out, lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = np.multiply(av, bv)
    if not _taped(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record("mul", (a, b), out,
                   lambda g: (unbroadcast(g * bv, sa), unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = np.divide(av, bv)
    if not _taped(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record("div", (a, b), out,
                   lambda g: (unbroadcast(g / bv, sa), unbroadcast(-g * out / bv, sb)))


def neg(a):
    if not _taped(a):
        return np.negative(a)
    return _record("neg", (a,), -a.values, lambda g: (-g,))


def power(a, p: float):
    """``a ** p`` for a constant real exponent."""
    av = _val(a)
    if p != int(p) and np.any(av < 0):
        raise DomainError("fractional power of a negative value")
    out = np.power(av, p)
    if not _taped(a):
        return out
    return _record("pow", (a,), out, lambda g: (g * p * np.power(av, p - 1),))


def exp(a):
    out = np.exp(_val(a))
    if not _taped(a):
        return out
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    av = _val(a)
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    out = np.log(av)
    if not _taped(a):
        return out
    return _record("log", (a,), out, lambda g: (g / av,))


def sqrt(a):
    av = _val(a)
    if np.any(av < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(av)
    if not _taped(a):
        return out
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(_val(a))
    if not _taped(a):
        return out
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sin(a):
    av = _val(a)
    out = np.sin(av)
    if not _taped(a):
        return out
    return _record("sin", (a,), out, lambda g: (g * np.cos(av),))


def cos(a):
    av = _val(a)
    out = np.cos(av)
    if not _taped(a):
        return out
    return _record("cos", (a,), out, lambda g: (-g * np.sin(av),))


def sigmoid(a):
    av = _val(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    if not _taped(a):
        return out
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """``log(1 + exp(a))`` without overflow."""
    av = _val(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    if not _taped(a):
        return out
    return _record("softplus", (a,), out, lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * av)),))


def silu(a):
    av = _val(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * av))
    out = av * s
    if not _taped(a):
        return out
    return _record("silu", (a,), out, lambda g: (g * (s + av * s * (1.0 - s)),))


def elu(a):
    av = _val(a)
    e = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, e)
    if not _taped(a):
        return out
    return _record("elu", (a,), out, lambda g: (g * np.where(av > 0, 1.0, e + 1.0),))


def minimum(a, b):
    av, bv = _val(a), _val(b)
    out = np.minimum(av, bv)
    if not _taped(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record("min", (a, b), out, lambda g: (unbroadcast(g * (av < bv), sa),
                                                  unbroadcast(g * (bv < av), sb)))


def maximum(a, b):
    av, bv = _val(a), _val(b)
    out = np.maximum(av, bv)
    if not _taped(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record("max", (a, b), out, lambda g: (unbroadcast(g * (av > bv), sa),
                                                  unbroadcast(g * (bv > av), sb)))


def clamp(a, lo=None, hi=None):
    """Clip to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    av = _val(a)
    out = np.clip(av, lo, hi)
    if not _taped(a):
        return out
    inside = np.ones(av.shape, dtype=bool)
    if lo is not None:
        inside &= av > lo
    if hi is not None:
        inside &= av < hi
    return _record("clamp", (a,), out, lambda g: (g * inside,))


def where(cond, a, b):
    """Select elementwise; ``cond`` is treated as a constant."""
    c = np.asarray(_val(cond), dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(c, av, bv)
    if not _taped(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record("where", (a, b), out, lambda g: (unbroadcast(np.where(c, g, 0.0), sa),
                                                    unbroadcast(np.where(c, 0.0, g), sb)))


def abs(a):
    av = _val(a)
    out = np.abs(av)
    if not _taped(a):
        return out
    return _record("abs", (a,), out, lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(a, axis=None, keepdims=False):
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not _taped(a):
        return out
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _record("sum", (a,), out, vjp)


def amax(a, axis=-1, keepdims=False):
    """Max reduction; the adjoint is split evenly among entries tied at the max."""
    av = _val(a)
    out = np.max(av, axis=axis, keepdims=keepdims)
    if not _taped(a):
        return out

    def vjp(g):
        m = np.max(av, axis=axis, keepdims=True)
        hit = (av == m).astype(np.float64)
        hit /= hit.sum(axis=axis, keepdims=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (hit * gg,)
    return _record("amax", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    av = _val(a)
    out = np.reshape(av, shape)
    if not _taped(a):
        return out
    s = av.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(s),))


def swapaxes(a, i, j):
    out = np.swapaxes(_val(a), i, j)
    if not _taped(a):
        return out
    return _record("swapaxes", (a,), out, lambda g: (np.swapaxes(g, i, j),))


def transpose(a, axes):
    out = np.transpose(_val(a), axes)
    if not _taped(a):
        return out
    inv = np.argsort(axes)
    return _record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    av = _val(a)
    out = np.broadcast_to(av, shape).copy()
    if not _taped(a):
        return out
    s = np.shape(av)
    return _record("broadcast", (a,), out, lambda g: (unbroadcast(g, s),))


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(_val(a), axis).shape)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    av = _val(a)
    out = av[idx]
    if not _taped(a):
        return out
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros_like(av)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)
    return _record("getitem", (a,), np.array(out), vjp)


def concatenate(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _taped(*xs):
        return out
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record("concat", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis=0):
    vals = [np.asarray(_val(x), dtype=np.float64) for x in xs]
    out = np.stack(vals, axis=axis)
    if not _taped(*xs):
        return out
    n = len(vals)
    return _record("stack", tuple(xs), out,
                   lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)))


def gather(a, idx):
    """``a[idx]`` along axis 0 with an integer index array of any shape."""
    av = _val(a)
    idx = np.asarray(idx)
    out = av[idx]
    if not _taped(a):
        return out
    n = av.shape[0]
    return _record("gather", (a,), out, lambda g: (scatter_add(g, idx, n),))


def scatter_add(src, idx, n):
    """Sum rows of ``src`` into ``n`` output rows addressed by ``idx``.

    Accumulation runs sequentially in index order, so results are
    bit-reproducible.
    """
    sv = _val(src)
    idx = np.asarray(idx)
    flat_idx = idx.reshape(-1)
    tail = sv.shape[idx.ndim:]
    cols = sv.reshape(flat_idx.size, -1)
    out = np.empty((n, cols.shape[1]))
    for c in range(cols.shape[1]):
        out[:, c] = np.bincount(flat_idx, weights=cols[:, c], minlength=n)
    out = out.reshape((n,) + tail)
    if not _taped(src):
        return out
    return _record("scatter_add", (src,), out, lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = np.matmul(av, bv)
    if not _taped(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = g[..., None] * av
        elif av.ndim == 1:
            ga = np.einsum("...j,...ij->...i", g, bv)
            gb = av[:, None] * g[..., None, :]
        else:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return unbroadcast(ga, sa), unbroadcast(gb, sb)
    return _record("matmul", (a, b), out, vjp)


def einsum(spec: str, a, b):
    """Two-operand einsum with an explicit output and no repeated indices."""
    ins, out_s = spec.replace(" ", "").split("->")
    sa_s, sb_s = ins.split(",")
    av, bv = _val(a), _val(b)
    out = np.einsum(spec, av, bv)
    if not _taped(a, b):
        return out

    def vjp(g):
        ga = np.einsum(f"{out_s},{sb_s}->{sa_s}", g, bv) if set(sa_s) <= set(out_s + sb_s) else None
        gb = np.einsum(f"{out_s},{sa_s}->{sb_s}", g, av) if set(sb_s) <= set(out_s + sa_s) else None
        if ga is None or gb is None:
            raise NotImplementedError(f"einsum adjoint for {spec!r}")
        return ga, gb
    return _record("einsum", (a, b), out, vjp)


def _cross(a, b):
    return np.cross(a, b, axis=-1)


def det3(a):
    """Determinant of (..., 3, 3) matrices."""
    av = _val(a)
    cof = _cofactor(av)
    out = np.einsum("...i,...i->...", av[..., :, 0], cof[..., :, 0])
    if not _taped(a):
        return out
    return _record("det3", (a,), out, lambda g: (g[..., None, None] * cof,))


def _cofactor(m):
    c0 = _cross(m[..., :, 1], m[..., :, 2])
    c1 = _cross(m[..., :, 2], m[..., :, 0])
    c2 = _cross(m[..., :, 0], m[..., :, 1])
    return np.stack([c0, c1, c2], axis=-1)


def cofactor3(a):
    """Cofactor matrix ``det(A) A^{-T}`` of (..., 3, 3) matrices."""
    av = _val(a)
    out = _cofactor(av)
    if not _taped(a):
        return out

    def vjp(g):
        a0, a1, a2 = av[..., :, 0], av[..., :, 1], av[..., :, 2]
        g0, g1, g2 = g[..., :, 0], g[..., :, 1], g[..., :, 2]
        d0 = _cross(g1, a2) + _cross(a1, g2)
        d1 = _cross(a2, g0) + _cross(g2, a0)
        d2 = _cross(g0, a1) + _cross(a0, g1)
        return (np.stack([d0, d1, d2], axis=-1),)
    return _record("cofactor3", (a,), out, vjp)


def solve(A, b):
    """Solve ``A x = b`` for batched dense systems (b is (..., n))."""
    Av, bv = _val(A), _val(b)
    x = np.linalg.solve(Av, bv[..., None])[..., 0]
    if not _taped(A, b):
        return x
    sA, sb = np.shape(Av), np.shape(bv)

    def vjp(g):
        gb = np.linalg.solve(np.swapaxes(Av, -1, -2), g[..., None])[..., 0]
        gA = -gb[..., :, None] * x[..., None, :]
        return unbroadcast(gA, sA), unbroadcast(gb, sb)
    return _record("solve", (A, b), x, vjp)


def _canonical_svd(m):
    batch = m.shape[:-2]
    U, S, Vt = np.linalg.svd(m.reshape(-1, 3, 3))
    V = np.swapaxes(Vt, -1, -2)
    # sign convention: the largest-magnitude entry of each V column is positive
    pick = np.argmax(np.abs(V), axis=-2)[..., None, :]
    sgn = np.sign(np.take_along_axis(V, pick, axis=-2))
    sgn[sgn == 0] = 1.0
    U = U * sgn
    V = V * sgn
    # rotations for U and V; a reflection is carried by the last singular value
    dv = np.linalg.det(V)
    flip_v = dv < 0
    V[flip_v, :, 2] *= -1
    U[flip_v, :, 2] *= -1
    du = np.linalg.det(U)
    flip_u = du < 0
    U[flip_u, :, 2] *= -1
    S = S.copy()
    S[flip_u, 2] *= -1
    return U.reshape(batch + (3, 3)), S.reshape(batch + (3,)), V.reshape(batch + (3, 3))


def svd3x3(a):
    """``A = U diag(S) V^T`` with U, V proper rotations.

    The adjoint uses the standard SVD differential; singular-value
    difference denominators are clamped away from zero at 1e-9.
    """
    av = _val(a)
    U, S, V = _canonical_svd(np.asarray(av, dtype=np.float64))
    if not _taped(a):
        return U, S, V

    def vjp(gouts):
        gU, gS, gV = (np.zeros_like(o) if g is None else g for g, o in zip(gouts, (U, S, V)))
        s2 = S * S
        d = s2[..., None, :] - s2[..., :, None]  # d_ij = s_j^2 - s_i^2
        upper = np.triu(np.ones((3, 3), dtype=bool), 1)
        sign = np.where(d > 0, 1.0, np.where(d < 0, -1.0, np.where(upper, 1.0, -1.0)))
        d = np.where(np.abs(d) < _SVD_DENOM_EPS, sign * _SVD_DENOM_EPS, d)
        Fm = 1.0 / d
        Fm[..., np.arange(3), np.arange(3)] = 0.0
        Ut, Vt = np.swapaxes(U, -1, -2), np.swapaxes(V, -1, -2)
        J = Fm * (Ut @ gU - np.swapaxes(gU, -1, -2) @ U)
        K = Fm * (Vt @ gV - np.swapaxes(gV, -1, -2) @ V)
        Sd = S[..., None, :]  # right-multiply by diag(S)
        inner = J * Sd + S[..., :, None] * K
        inner[..., np.arange(3), np.arange(3)] += gS
        return (U @ inner @ Vt,)
    return _record_multi("svd3x3", (a,), (U, S, V), vjp)


def record(op_kind: str, *inputs, **kwargs):
    """Dispatch a primitive by name."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": power,
    "exp": exp, "log": log, "tanh": tanh, "sqrt": sqrt, "sin": sin, "cos": cos,
    "sigmoid": sigmoid, "softplus": softplus, "silu": silu, "elu": elu, "abs": abs,
    "min": minimum, "max": maximum, "clamp": clamp, "where": where,
    "sum": sum, "mean": mean, "amax": amax, "matmul": matmul, "einsum": einsum,
    "gather": gather, "scatter_add": scatter_add, "getitem": getitem,
    "reshape": reshape, "transpose": transpose, "concat": concatenate, "stack": stack,
    "broadcast_to": broadcast_to, "svd3x3": svd3x3, "det3": det3,
    "cofactor3": cofactor3, "solve": solve,
}


def graph_of(*args):
    """The TapeGraph shared by any TapeVars among ``args`` (None if untaped)."""
    return _graph_of(args)
