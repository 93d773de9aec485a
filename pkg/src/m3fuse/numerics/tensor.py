"""Dense float64 tensors with a reverse-mode differentiation tape.

Every learnable stage of the detection pipeline is expressed through the
op set in this module.  Ops compute their forward value eagerly with numpy
and, when a Graph is active on the current thread, append a node carrying
the backward rule to that graph's tape.  Tape append order is topological
by construction, so the backward pass is a single reverse sweep that
touches each node exactly once.

Reductions that cross a token/keypoint axis (softmax normalizers and the
attention value mix) accumulate in value-sorted order so that permuting
the inputs permutes the outputs bitwise; this is what makes the
permutation-equivariance guarantees of the fusion layers exact rather
than approximate.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes incompatible with the requested op."""


class DomainError(ValueError):
    """Operand values outside the op's domain (e.g. log of nonpositive)."""


class EmptyInputError(ValueError):
    """Reduction or sampling over an empty axis/set."""


class GraphError(RuntimeError):
    """Tape misuse: backward on foreign/non-scalar outputs, reentrancy."""


class Tensor:
    """A dense float64 array, optionally a differentiable leaf.

    Tensors are immutable once created (the optimizer rebinds leaf
    ``data`` between graphs, never while a tape referencing it is live).
    ``grad`` is populated on leaves with ``requires_grad`` after a
    backward pass and accumulates across passes until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the named functions below are the real op set
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A non-differentiable tensor (targets, masks, offsets)."""
    return Tensor(data, requires_grad=False)


class Node:
    """One recorded op: its output, its parents, and the backward rule."""

    __slots__ = ("out", "parents", "backward_fn", "needs_grad", "graph")

    def __init__(self, out: Tensor, parents: tuple, backward_fn, needs_grad: bool, graph: "Graph"):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.needs_grad = needs_grad
        self.graph = graph


_tls = threading.local()


def current_graph() -> Optional["Graph"]:
    stack = getattr(_tls, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Append-only tape of ops; confined to one thread.

    Used as a context manager::

        with Graph() as g:
            loss = ...   # ops record onto g
        g.backward(loss)

    ``visit_counts`` after backward holds exactly one visit per node,
    which the test suite asserts as the single-visit invariant.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.visit_counts: list[int] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Graph":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tls.stack.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GraphError("graph context exited out of order")
        return False

    def _tracked(self, t: Tensor) -> bool:
        if t.requires_grad:
            return True
        node = t._node
        return node is not None and node.graph is self and node.needs_grad

    def record(self, out: Tensor, parents: tuple, backward_fn) -> Tensor:
        needs = any(self._tracked(p) for p in parents)
        node = Node(out, parents, backward_fn, needs, self)
        out._node = node
        self.nodes.append(node)
        return out

    def backward(self, loss: Tensor) -> None:
        node = loss._node
        if node is None or node.graph is not self:
            raise GraphError("backward target was not produced on this graph")
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        self.visit_counts = [0] * len(self.nodes)
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        for i in range(len(self.nodes) - 1, -1, -1):
            nd = self.nodes[i]
            self.visit_counts[i] += 1
            g = grads.pop(id(nd.out), None)
            if g is None or not nd.needs_grad:
                continue
            parent_grads = nd.backward_fn(g)
            for p, pg in zip(nd.parents, parent_grads):
                if pg is None or not self._tracked(p):
                    continue
                p_node = p._node
                if p_node is not None and p_node.graph is self:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:  # leaf of this graph
                    key = id(p)
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                        leaves[key] = p

        for key, g in leaf_grads.items():
            leaf = leaves[key]
            if not leaf.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g


def _record(out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(out_data)
    g = current_graph()
    if g is not None:
        g.record(out, parents, backward_fn)
    return out


def _sorted_sum(x: np.ndarray, axis: int) -> np.ndarray:
    # value-canonical accumulation: invariant to permutations along `axis`
    return np.sort(x, axis=axis).sum(axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs 2-D, got {x.shape}")
    out = x.data.T.copy()

    def backward(g):
        return (g.T,)

    return _record(out, (x,), backward)


def bmm_nt(a: Tensor, b: Tensor, la: int, lb: int) -> Tensor:
    """Blockwise A_blk @ B_blk^T for stacked sequences.

    ``a`` is (B*la, d) and ``b`` is (B*lb, d), both grouped in B
    consecutive blocks; returns (B*la, lb).  Used for attention logits,
    where the contraction runs over the channel axis only.
    """
    d = a.shape[1]
    if b.shape[1] != d or a.shape[0] % la or b.shape[0] % lb:
        raise DimensionError(f"bmm_nt shapes {a.shape} x {b.shape} blocks ({la},{lb})")
    nb = a.shape[0] // la
    if b.shape[0] // lb != nb:
        raise DimensionError("bmm_nt block count mismatch")
    a3 = a.data.reshape(nb, la, d)
    b3 = b.data.reshape(nb, lb, d)
    out = np.matmul(a3, b3.transpose(0, 2, 1)).reshape(nb * la, lb)

    def backward(g):
        g3 = g.reshape(nb, la, lb)
        da = np.matmul(g3, b3).reshape(nb * la, d)
        db = np.matmul(g3.transpose(0, 2, 1), a3).reshape(nb * lb, d)
        return (da, db)

    return _record(out, (a, b), backward)


def attn_mix(w: Tensor, v: Tensor, la: int, lb: int) -> Tensor:
    """Blockwise W_blk @ V_blk with value-sorted accumulation.

    ``w`` is (B*la, lb) attention weights, ``v`` is (B*lb, d) values.
    The sum over the lb (key) axis is taken in sorted order of the
    addends so a permutation of keys/rows yields bitwise-equal outputs.
    """
    if w.shape[0] % la or v.shape[0] % lb or w.shape[1] != lb:
        raise DimensionError(f"attn_mix shapes {w.shape} x {v.shape} blocks ({la},{lb})")
    nb = w.shape[0] // la
    if v.shape[0] // lb != nb:
        raise DimensionError("attn_mix block count mismatch")
    d = v.shape[1]
    w3 = w.data.reshape(nb, la, lb)
    v3 = v.data.reshape(nb, lb, d)
    prod = w3[:, :, :, None] * v3[:, None, :, :]
    out = _sorted_sum(prod, axis=2).reshape(nb * la, d)

    def backward(g):
        g3 = g.reshape(nb, la, d)
        dw = np.matmul(g3, v3.transpose(0, 2, 1)).reshape(nb * la, lb)
        dv = np.matmul(w3.transpose(0, 2, 1), g3).reshape(nb * lb, d)
        return (dw, dv)

    return _record(out, (w, v), backward)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_kind(a_shape, b_shape):
    if a_shape == b_shape:
        return "same"
    if len(b_shape) == 1 and len(a_shape) >= 1 and a_shape[-1] == b_shape[0]:
        return "trailing"
    raise DimensionError(f"shapes {a_shape} and {b_shape} neither equal nor trailing-broadcast")


def _reduce_to_trailing(g: np.ndarray) -> np.ndarray:
    axes = tuple(range(g.ndim - 1))
    return g.sum(axis=axes) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        gb = g if kind == "same" else _reduce_to_trailing(g)
        return (g, gb)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        gb = -g if kind == "same" else -_reduce_to_trailing(g)
        return (g, gb)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if kind == "trailing":
            gb = _reduce_to_trailing(gb)
        return (ga, gb)

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def backward(g):
        return (g * c,)

    return _record(out, (x,), backward)


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data + c

    def backward(g):
        return (g,)

    return _record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0  # subgradient 0 at the kink

    def backward(g):
        return (g * mask,)

    return _record(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise DomainError("log of nonpositive value")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _record(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _record(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.where(z >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), backward)


def powc(x: Tensor, c: float) -> Tensor:
    """x ** c for positive x (exponent is a constant)."""
    if np.any(x.data <= 0.0):
        raise DomainError("powc needs positive base")
    c = float(c)
    out = x.data**c

    def backward(g):
        return (g * c * x.data ** (c - 1.0),)

    return _record(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = out == x.data  # gradient flows only where not clipped

    def backward(g):
        return (g * mask,)

    return _record(out, (x,), backward)


def mul_rows(x: Tensor, w: np.ndarray) -> Tensor:
    """Scale each row of a 2-D tensor by a constant per-row weight."""
    w = np.asarray(w, dtype=np.float64)
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise DimensionError(f"mul_rows shapes {x.shape} and {w.shape}")
    out = x.data * w[:, None]

    def backward(g):
        return (g * w[:, None],)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization / attention kernels


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max subtraction and value-sorted normalizers."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs 2-D, got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = _sorted_sum(e, axis=1)[:, None]
    out = e / s

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by a learned affine map."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm needs 2-D, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} for width {d}")
    if eps <= 0.0:
        raise DomainError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        return (dx, dgain, dbias)

    return _record(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# indexing / layout


def gather_rows(x: Tensor, idx) -> Tensor:
    """Copy rows in index order; backward scatter-adds (duplicates accumulate)."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows needs 2-D, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows index must be 1-D")
    m = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"gather_rows index out of range [0, {m})")
    out = x.data[idx]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _record(out, (x,), backward)


def scatter_rows(x: Tensor, idx, m: int) -> Tensor:
    """Scatter-add rows of x into an m-row zero tensor at positions idx."""
    if x.data.ndim != 2:
        raise DimensionError(f"scatter_rows needs 2-D, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError("scatter_rows index length must match row count")
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"scatter_rows index out of range [0, {m})")
    out = np.zeros((m, x.shape[1]), dtype=np.float64)
    np.add.at(out, idx, x.data)

    def backward(g):
        return (g[idx],)

    return _record(out, (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    widths = {p.shape[1] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise DimensionError("concat_rows needs 2-D parts of equal width")
    out = np.vstack([p.data for p in parts])
    rows = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + rows)

    def backward(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    heights = {p.shape[0] for p in parts if p.data.ndim == 2}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise DimensionError("concat_cols needs 2-D parts of equal height")
    out = np.hstack([p.data for p in parts])
    cols = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + cols)

    def backward(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] of {x.shape}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape {x.shape} -> {shape}")
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is not None and not (0 <= axis < x.data.ndim):
        raise DimensionError(f"reduce axis {axis} for shape {x.shape}")
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record(out, (x,), backward)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is not None and not (0 <= axis < x.data.ndim):
        raise DimensionError(f"reduce axis {axis} for shape {x.shape}")
    n = x.data.size if axis is None else x.data.shape[axis]
    if n == 0:
        raise EmptyInputError("mean over empty axis")
    out = x.data.mean(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy() / n,)

    return _record(out, (x,), backward)


def reduce_max(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Max reduction; backward routes to the first maximal element."""
    if x.data.size == 0:
        raise EmptyInputError("max over empty input")
    if axis is not None and not (0 <= axis < x.data.ndim):
        raise DimensionError(f"reduce axis {axis} for shape {x.shape}")
    out = x.data.max(axis=axis)
    amax = x.data.argmax(axis=axis)  # first occurrence on ties

    def backward(g):
        dx = np.zeros_like(x.data)
        if axis is None:
            dx.reshape(-1)[amax] = float(g)
        else:
            grid = np.indices(amax.shape)
            idx = list(grid)
            idx.insert(axis, amax)
            dx[tuple(idx)] = g
        return (dx,)

    return _record(out, (x,), backward)


def segment_max(x: Tensor, bounds: np.ndarray) -> Tensor:
    """Channelwise max over contiguous row segments; empty segments give 0.

    ``bounds`` is an ascending int array of length n_segments+1; segment i
    spans rows [bounds[i], bounds[i+1]).  Backward routes each channel's
    gradient to the first maximal row of its segment.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"segment_max needs 2-D, got {x.shape}")
    bounds = np.asarray(bounds, dtype=np.int64)
    if bounds.ndim != 1 or bounds.size < 1 or np.any(np.diff(bounds) < 0):
        raise DimensionError("segment bounds must be ascending")
    if bounds[0] != 0 or bounds[-1] != x.shape[0]:
        raise DimensionError("segment bounds must cover all rows")
    nseg = bounds.size - 1
    d = x.shape[1]
    out = np.zeros((nseg, d), dtype=np.float64)
    for i in range(nseg):
        lo, hi = bounds[i], bounds[i + 1]
        if hi > lo:
            out[i] = x.data[lo:hi].max(axis=0)

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(nseg):
            lo, hi = bounds[i], bounds[i + 1]
            if hi > lo:
                rows = x.data[lo:hi].argmax(axis=0)
                dx[lo + rows, np.arange(d)] += g[i]
        return (dx,)

    return _record(out, (x,), backward)
