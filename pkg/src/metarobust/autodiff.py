"""Reverse-mode automatic differentiation on a tape of dense float64 tensors.

Gradients are built either as plain numpy values (``create_graph=False``) or
as new nodes appended to the same tape (``create_graph=True``), so gradient
expressions are themselves differentiable. That is what lets the meta-learner
differentiate through inner-loop gradient-descent updates, and lets the
invariance penalty square a gradient and remain differentiable.

Tensors are C-contiguous float64 ndarrays. There is no implicit broadcasting:
shapes must match exactly everywhere except through the explicit ``broadcast``
primitive. ``relu`` uses subgradient 0 at exactly 0.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when an op's input shapes violate its shape rule."""

    def __init__(self, op, shapes, detail=""):
        msg = f"shape mismatch in op '{op}': {' vs '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = tuple(shapes)


class GradError(ValueError):
    """Raised on invalid grad() requests (non-scalar output, bad wrt)."""


def as_tensor(x):
    """Coerce to a C-contiguous float64 ndarray (the tape's value type)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim and not a.flags.c_contiguous:
        a = np.ascontiguousarray(a)   # ascontiguousarray would promote 0-d to 1-d
    return a


class Node:
    __slots__ = ("op", "parents", "value", "requires_grad", "attrs", "leafmask")

    def __init__(self, op, parents, value, requires_grad, attrs, leafmask):
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs
        self.leafmask = leafmask

    @property
    def shape(self):
        return self.value.shape


class Graph:
    """Append-only tape. Node ids are indices; parents always precede children.

    A Graph is single-threaded; build and evaluate distinct Graphs
    concurrently if needed.
    """

    def __init__(self):
        self.nodes = []
        self._n_leaves = 0

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, value, requires_grad=False):
        """Add a leaf holding `value`. Differentiation targets must set
        requires_grad."""
        value = as_tensor(value)
        mask = 0
        if requires_grad:
            # one bit per grad leaf; collisions past 63 leaves only widen the
            # backward traversal, never narrow it
            mask = 1 << (self._n_leaves % 63)
            self._n_leaves += 1
        return self._append(Node("leaf", (), value, requires_grad, None, mask))

    def constant(self, value):
        return self.input(value, requires_grad=False)

    def value(self, nid):
        return self.nodes[nid].value

    def shape(self, nid):
        return self.nodes[nid].value.shape

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------

def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(op, (a.shape, b.shape), "operands must match exactly")


def _fw_add(vals, attrs):
    _check_same_shape("add", vals[0], vals[1])
    return vals[0] + vals[1]


def _fw_sub(vals, attrs):
    _check_same_shape("sub", vals[0], vals[1])
    return vals[0] - vals[1]


def _fw_mul(vals, attrs):
    _check_same_shape("mul", vals[0], vals[1])
    return vals[0] * vals[1]


def _fw_div(vals, attrs):
    _check_same_shape("div", vals[0], vals[1])
    return vals[0] / vals[1]


def _fw_smul(vals, attrs):
    return vals[0] * attrs[0]


def _fw_matmul(vals, attrs):
    a, b = vals
    ta, tb = attrs
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError("matmul", (a.shape, b.shape), "2-D operands required")
    am = a.T if ta else a
    bm = b.T if tb else b
    if am.shape[1] != bm.shape[0]:
        raise ShapeMismatchError("matmul", (a.shape, b.shape),
                                 f"inner dims {am.shape[1]} != {bm.shape[0]}")
    return am @ bm


def _fw_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _fw_exp(vals, attrs):
    return np.exp(vals[0])


def _fw_log(vals, attrs):
    return np.log(vals[0])


def _fw_square(vals, attrs):
    return vals[0] * vals[0]


def _fw_sum(vals, attrs):
    axis = attrs[0]
    if axis is None:
        return np.asarray(vals[0].sum())
    return vals[0].sum(axis=axis, keepdims=True)


def _fw_mean(vals, attrs):
    axis = attrs[0]
    if axis is None:
        return np.asarray(vals[0].mean())
    return vals[0].mean(axis=axis, keepdims=True)


def _fw_sum_sq(vals, attrs):
    v = vals[0]
    return np.asarray((v * v).sum())


def _fw_broadcast(vals, attrs):
    v = vals[0]
    target = attrs[0]
    if v.shape != () and len(v.shape) != len(target):
        raise ShapeMismatchError("broadcast", (v.shape, target),
                                 "rank must match target (or source is scalar)")
    if v.shape != ():
        for s, t in zip(v.shape, target):
            if s != t and s != 1:
                raise ShapeMismatchError("broadcast", (v.shape, target))
    return np.broadcast_to(v, target)


def _fw_reshape(vals, attrs):
    v = vals[0]
    target = attrs[0]
    if int(np.prod(v.shape)) != int(np.prod(target)):
        raise ShapeMismatchError("reshape", (v.shape, target), "element count differs")
    return v.reshape(target)


def _fw_concat(vals, attrs):
    axis = attrs[0]
    rank = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != rank:
            raise ShapeMismatchError("concat", tuple(v.shape for v in vals))
        for ax in range(rank):
            if ax != axis and v.shape[ax] != vals[0].shape[ax]:
                raise ShapeMismatchError("concat", tuple(v.shape for v in vals),
                                         f"dims differ off axis {axis}")
    return np.concatenate(vals, axis=axis)


def _fw_slice(vals, attrs):
    axis, start, stop = attrs
    v = vals[0]
    if not (0 <= start < stop <= v.shape[axis]):
        raise ShapeMismatchError("slice", (v.shape,),
                                 f"range [{start}:{stop}] out of bounds on axis {axis}")
    idx = [slice(None)] * v.ndim
    idx[axis] = slice(start, stop)
    return v[tuple(idx)]


def _fw_log_softmax(vals, attrs):
    z = vals[0]
    if z.ndim != 2:
        raise ShapeMismatchError("log_softmax", (z.shape,), "2-D logits required")
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


_FORWARD = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "smul": _fw_smul,
    "matmul": _fw_matmul,
    "relu": _fw_relu,
    "exp": _fw_exp,
    "log": _fw_log,
    "square": _fw_square,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "sum_sq": _fw_sum_sq,
    "broadcast": _fw_broadcast,
    "reshape": _fw_reshape,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "log_softmax": _fw_log_softmax,
}


def apply_primitive(graph, op, inputs, attrs=None):
    """Append one primitive node; the forward value is computed eagerly.

    `inputs` are node ids already on `graph`. Returns the new node id.
    """
    fw = _FORWARD.get(op)
    if fw is None:
        raise ValueError(f"unknown primitive '{op}'")
    nodes = graph.nodes
    vals = [nodes[i].value for i in inputs]
    out = fw(vals, attrs)
    if not isinstance(out, np.ndarray) or out.dtype != np.float64:
        out = as_tensor(out)
    rg = False
    mask = 0
    for i in inputs:
        n = nodes[i]
        if n.requires_grad:
            rg = True
            mask |= n.leafmask
    return graph._append(Node(op, tuple(inputs), out, rg, attrs, mask))


# ergonomic wrappers -- the vocabulary the rest of the package builds graphs in

def add(g, a, b):
    return apply_primitive(g, "add", (a, b))


def sub(g, a, b):
    return apply_primitive(g, "sub", (a, b))


def mul(g, a, b):
    return apply_primitive(g, "mul", (a, b))


def div(g, a, b):
    return apply_primitive(g, "div", (a, b))


def smul(g, a, c):
    return apply_primitive(g, "smul", (a,), (float(c),))


def matmul(g, a, b, ta=False, tb=False):
    return apply_primitive(g, "matmul", (a, b), (ta, tb))


def relu(g, a):
    return apply_primitive(g, "relu", (a,))


def exp(g, a):
    return apply_primitive(g, "exp", (a,))


def log(g, a):
    return apply_primitive(g, "log", (a,))


def square(g, a):
    return apply_primitive(g, "square", (a,))


def reduce_sum(g, a, axis=None):
    return apply_primitive(g, "sum", (a,), (axis,))


def reduce_mean(g, a, axis=None):
    return apply_primitive(g, "mean", (a,), (axis,))


def sum_sq(g, a):
    return apply_primitive(g, "sum_sq", (a,))


def broadcast_to(g, a, shape):
    return apply_primitive(g, "broadcast", (a,), (tuple(shape),))


def reshape(g, a, shape):
    return apply_primitive(g, "reshape", (a,), (tuple(shape),))


def concat(g, ids, axis=0):
    return apply_primitive(g, "concat", tuple(ids), (axis,))


def slice_(g, a, axis, start, stop):
    return apply_primitive(g, "slice", (a,), (axis, start, stop))


def log_softmax(g, a):
    return apply_primitive(g, "log_softmax", (a,))


# ---------------------------------------------------------------------------
# backward rules, written once against a backend that is either numpy values
# or graph construction
# ---------------------------------------------------------------------------

class _ValueBackend:
    """VJP arithmetic on plain ndarrays (create_graph=False)."""

    def __init__(self, graph):
        self._nodes = graph.nodes

    def ref(self, nid):
        return self._nodes[nid].value

    def const(self, arr):
        return arr

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def div(self, a, b):
        return a / b

    def smul(self, a, c):
        return a * c

    def matmul(self, a, b, ta=False, tb=False):
        return (a.T if ta else a) @ (b.T if tb else b)

    def exp(self, a):
        return np.exp(a)

    def square(self, a):
        return a * a

    def reshape(self, a, shape):
        return a.reshape(shape)

    def broadcast(self, a, shape):
        return np.broadcast_to(a, shape)

    def sum_axis(self, a, axis):
        return a.sum(axis=axis, keepdims=True)

    def slice_axis(self, a, axis, start, stop):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, stop)
        return a[tuple(idx)]

    def sum_to(self, a, shape):
        if a.shape == tuple(shape):
            return a
        if shape == ():
            return np.asarray(a.sum())
        for ax, (s, t) in enumerate(zip(a.shape, shape)):
            if t == 1 and s != 1:
                a = a.sum(axis=ax, keepdims=True)
        return a

    def pad_slice(self, a, full_shape, axis, start, stop):
        out = np.zeros(full_shape)
        idx = [slice(None)] * len(full_shape)
        idx[axis] = slice(start, stop)
        out[tuple(idx)] = a
        return out

    def zeros(self, shape):
        return np.zeros(shape)


class _GraphBackend:
    """VJP arithmetic that appends nodes (create_graph=True)."""

    def __init__(self, graph):
        self._g = graph

    def ref(self, nid):
        return nid

    def const(self, arr):
        return self._g.constant(arr)

    def add(self, a, b):
        return add(self._g, a, b)

    def mul(self, a, b):
        return mul(self._g, a, b)

    def div(self, a, b):
        return div(self._g, a, b)

    def smul(self, a, c):
        return smul(self._g, a, c)

    def matmul(self, a, b, ta=False, tb=False):
        return matmul(self._g, a, b, ta=ta, tb=tb)

    def exp(self, a):
        return exp(self._g, a)

    def square(self, a):
        return square(self._g, a)

    def reshape(self, a, shape):
        return reshape(self._g, a, shape)

    def broadcast(self, a, shape):
        return broadcast_to(self._g, a, shape)

    def sum_axis(self, a, axis):
        return reduce_sum(self._g, a, axis=axis)

    def slice_axis(self, a, axis, start, stop):
        return slice_(self._g, a, axis, start, stop)

    def sum_to(self, a, shape):
        g = self._g
        cur = g.shape(a)
        if cur == tuple(shape):
            return a
        if shape == ():
            return reduce_sum(g, a)
        out = a
        for ax, (s, t) in enumerate(zip(cur, shape)):
            if t == 1 and s != 1:
                out = reduce_sum(g, out, axis=ax)
        return out

    def pad_slice(self, a, full_shape, axis, start, stop):
        g = self._g
        pieces = []
        if start > 0:
            lo = list(full_shape)
            lo[axis] = start
            pieces.append(g.constant(np.zeros(lo)))
        pieces.append(a)
        if stop < full_shape[axis]:
            hi = list(full_shape)
            hi[axis] = full_shape[axis] - stop
            pieces.append(g.constant(np.zeros(hi)))
        if len(pieces) == 1:
            return a
        return concat(g, pieces, axis=axis)

    def zeros(self, shape):
        return self._g.constant(np.zeros(shape))


def _vjp(node, nid, g, B, needs, nodes):
    """Per-parent cotangents for one node. Entries not in `needs` are None."""
    op = node.op
    if op == "add":
        return (g if needs[0] else None, g if needs[1] else None)
    if op == "sub":
        return (g if needs[0] else None, B.smul(g, -1.0) if needs[1] else None)
    if op == "mul":
        a, b = node.parents
        return (B.mul(g, B.ref(b)) if needs[0] else None,
                B.mul(g, B.ref(a)) if needs[1] else None)
    if op == "div":
        a, b = node.parents
        da = B.div(g, B.ref(b)) if needs[0] else None
        db = None
        if needs[1]:
            db = B.smul(B.div(B.mul(g, B.ref(a)), B.square(B.ref(b))), -1.0)
        return (da, db)
    if op == "smul":
        return (B.smul(g, node.attrs[0]) if needs[0] else None,)
    if op == "matmul":
        a, b = node.parents
        ta, tb = node.attrs
        da = db = None
        if not ta and not tb:
            if needs[0]:
                da = B.matmul(g, B.ref(b), tb=True)
            if needs[1]:
                db = B.matmul(B.ref(a), g, ta=True)
        elif ta and not tb:
            if needs[0]:
                da = B.matmul(B.ref(b), g, tb=True)
            if needs[1]:
                db = B.matmul(B.ref(a), g)
        elif not ta and tb:
            if needs[0]:
                da = B.matmul(g, B.ref(b))
            if needs[1]:
                db = B.matmul(g, B.ref(a), ta=True)
        else:
            if needs[0]:
                da = B.matmul(B.ref(b), g, ta=True, tb=True)
            if needs[1]:
                db = B.matmul(g, B.ref(a), ta=True, tb=True)
        return (da, db)
    if op == "relu":
        # subgradient at 0 is 0, hence strict inequality
        mask = (nodes[node.parents[0]].value > 0.0).astype(np.float64)
        return (B.mul(g, B.const(mask)),)
    if op == "exp":
        return (B.mul(g, B.ref(nid)),)
    if op == "log":
        return (B.div(g, B.ref(node.parents[0])),)
    if op == "square":
        return (B.mul(g, B.smul(B.ref(node.parents[0]), 2.0)),)
    if op == "sum":
        pshape = nodes[node.parents[0]].value.shape
        return (B.broadcast(g, pshape),)
    if op == "mean":
        pshape = nodes[node.parents[0]].value.shape
        axis = node.attrs[0]
        n = int(np.prod(pshape)) if axis is None else pshape[axis]
        return (B.broadcast(B.smul(g, 1.0 / n), pshape),)
    if op == "sum_sq":
        p = node.parents[0]
        pshape = nodes[p].value.shape
        return (B.mul(B.broadcast(g, pshape), B.smul(B.ref(p), 2.0)),)
    if op == "broadcast":
        pshape = nodes[node.parents[0]].value.shape
        return (B.sum_to(g, pshape),)
    if op == "reshape":
        pshape = nodes[node.parents[0]].value.shape
        return (B.reshape(g, pshape),)
    if op == "concat":
        axis = node.attrs[0]
        out = []
        offset = 0
        for pos, p in enumerate(node.parents):
            width = nodes[p].value.shape[axis]
            if needs[pos]:
                out.append(B.slice_axis(g, axis, offset, offset + width))
            else:
                out.append(None)
            offset += width
        return tuple(out)
    if op == "slice":
        axis, start, stop = node.attrs
        pshape = nodes[node.parents[0]].value.shape
        return (B.pad_slice(g, pshape, axis, start, stop),)
    if op == "log_softmax":
        # d/dz = g - softmax(z) * rowsum(g); exp(out) is softmax exactly
        softmax = B.exp(B.ref(nid))
        rows = B.sum_axis(g, 1)
        shape = node.value.shape
        return (B.add(g, B.smul(B.mul(softmax, B.broadcast(rows, shape)), -1.0)),)
    raise ValueError(f"no backward rule for op '{op}'")


def grad(graph, output, wrt, create_graph=False):
    """Reverse-mode gradients of a scalar `output` node w.r.t. `wrt` nodes.

    With create_graph=True the result is a list of node ids whose nodes are
    themselves differentiable; otherwise a list of ndarrays. A wrt node that
    does not influence the output yields zeros of its shape (by convention,
    not an error).
    """
    nodes = graph.nodes
    out_node = nodes[output]
    if out_node.value.shape != ():
        raise GradError(f"grad output must be scalar, got shape {out_node.value.shape}")
    for w in wrt:
        if not nodes[w].requires_grad:
            raise GradError(f"wrt node {w} does not require grad")

    B = _GraphBackend(graph) if create_graph else _ValueBackend(graph)
    want = 0
    for w in wrt:
        want |= nodes[w].leafmask

    adj = {output: B.const(np.asarray(1.0))}
    heap = [-output]
    while heap:
        nid = -heapq.heappop(heap)
        node = nodes[nid]
        if not node.parents:
            continue
        g = adj[nid]
        if nid not in wrt and not (node.leafmask & want):
            # influences the output but no requested leaf (can occur only via
            # mask-bit collisions); nothing below it can either
            continue
        parents = node.parents
        needs = tuple(
            nodes[p].requires_grad and (nodes[p].leafmask & want or p in wrt)
            for p in parents
        )
        if not any(needs):
            continue
        pgrads = _vjp(node, nid, g, B, needs, nodes)
        for p, pg in zip(parents, pgrads):
            if pg is None:
                continue
            if p in adj:
                adj[p] = B.add(adj[p], pg)
            else:
                adj[p] = pg
                heapq.heappush(heap, -p)

    out = []
    for w in wrt:
        if w in adj:
            out.append(adj[w])
        else:
            out.append(B.zeros(nodes[w].value.shape))
    return out


# ---------------------------------------------------------------------------
# finite-difference verification oracle
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_index: int
    passed: bool
    n_params: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"finite-diff check: {status}, max rel error "
                f"{self.max_rel_error:.3e} at coordinate {self.worst_index} "
                f"({self.n_params} parameters)")


def finite_diff_check(f, point, h=1e-5, rtol=1e-4):
    """Compare f's analytic gradient against central finite differences.

    `f` maps a flat float64 vector to ``(value, gradient)``; only values are
    used at the probe points. Relative error uses a small absolute floor so
    near-zero coordinate pairs do not blow up.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = as_tensor(point).ravel()
    _, analytic = f(point)
    analytic = as_tensor(analytic).ravel()
    if analytic.shape != point.shape:
        raise ValueError(f"gradient shape {analytic.shape} does not match point "
                         f"shape {point.shape}")
    max_rel = 0.0
    worst = 0
    for i in range(point.size):
        probe = point.copy()
        probe[i] = point[i] + h
        f_hi, _ = f(probe)
        probe[i] = point[i] - h
        f_lo, _ = f(probe)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise FloatingPointError(
                f"non-finite function value at probe coordinate {i}")
        fd = (f_hi - f_lo) / (2.0 * h)
        denom = max(abs(fd), abs(analytic[i]), 1e-6)
        rel = abs(fd - analytic[i]) / denom
        if rel > max_rel:
            max_rel = rel
            worst = i
    return FiniteDiffReport(max_rel_error=float(max_rel), worst_index=worst,
                            passed=bool(max_rel <= rtol), n_params=point.size)
