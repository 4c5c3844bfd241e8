"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array. While a ``Tape`` is active
(``with Tape() as tape: ...``) every differentiable operation appends a
node holding vector-Jacobian closures for its tracked inputs. Nodes are
appended in execution order, so the list is already topologically sorted
and ``backward`` is a single reverse sweep that visits each node once.
A tape lives for one forward pass, is confined to the thread that opened
it, and is freed by ``backward``.

Shapes are strict: binary elementwise ops require equal shapes, and the
only broadcasting provided is what the network needs (``add_bias``,
``scale_rows``).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

Vjp = Callable[[np.ndarray], np.ndarray]


class ShapeError(ValueError):
    """Operand shapes or ranks are incompatible with the operation."""


class GraphError(RuntimeError):
    """The gradient graph cannot support the requested backward pass."""


class _ActiveTape(threading.local):
    current: "Tape | None" = None


_ACTIVE = _ActiveTape()


class Tape:
    """Ordered record of one forward pass.

    ``_nodes[i]`` is either ``None`` (a leaf: some tensor with
    ``requires_grad``) or a list of ``(parent_id, vjp)`` pairs. Every
    parent id is smaller than its node id.
    """

    def __init__(self) -> None:
        self._nodes: list[list[tuple[int, Vjp]] | None] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise GraphError("tape was already consumed by backward")
        if _ACTIVE.current is not None:
            raise GraphError("a tape is already active on this thread")
        _ACTIVE.current = self
        return self

    def __exit__(self, *exc) -> None:
        if _ACTIVE.current is self:
            _ACTIVE.current = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _add_leaf(self, t: "Tensor") -> int:
        nid = len(self._nodes)
        self._nodes.append(None)
        self._leaves[nid] = t
        return nid

    def _add_node(self, parents: list[tuple[int, Vjp]]) -> int:
        nid = len(self._nodes)
        self._nodes.append(parents)
        return nid


class Tensor:
    """Dense n-dimensional real array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _tracked_id(tape: Tape, t: Tensor) -> int | None:
    """Node id of ``t`` on ``tape``, registering a leaf if needed."""
    if t._tape is tape and t.node_id is not None:
        return t.node_id
    if t.requires_grad:
        nid = tape._add_leaf(t)
        t._tape, t.node_id = tape, nid
        return nid
    return None


def _record(out: Tensor, parents: Sequence[tuple[Tensor, Vjp]]) -> Tensor:
    tape = _ACTIVE.current
    if tape is None:
        return out
    tracked = []
    for t, vjp in parents:
        nid = _tracked_id(tape, t)
        if nid is not None:
            tracked.append((nid, vjp))
    if tracked:
        out._tape = tape
        out.node_id = tape._add_node(tracked)
    return out


def backward(loss: Tensor) -> None:
    """Propagate d(loss) to every ``requires_grad`` leaf on the tape.

    ``loss`` must be a scalar produced under an (open or closed) tape.
    Gradients accumulate into ``leaf.grad``; the tape is freed afterwards.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise GraphError("loss is detached from any gradient tape")
    if tape._consumed:
        raise GraphError("tape was already consumed by backward")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(len(tape._nodes) - 1, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        parents = tape._nodes[nid]
        if parents is None:
            leaf = tape._leaves[nid]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            continue
        for pid, vjp in parents:
            pg = vjp(g)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    tape._nodes.clear()
    tape._leaves.clear()


# ---------------------------------------------------------------------------
# elementwise ops


def _binary(a, b, name, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: operand shapes {a.shape} and {b.shape} differ")
    out = Tensor(fwd(a.data, b.data))
    return _record(out, [(a, vjp_a(a, b)), (b, vjp_b(a, b))])


def add(a, b) -> Tensor:
    return _binary(
        a, b, "add", np.add,
        lambda a, b: lambda g: g,
        lambda a, b: lambda g: g,
    )


def sub(a, b) -> Tensor:
    return _binary(
        a, b, "sub", np.subtract,
        lambda a, b: lambda g: g,
        lambda a, b: lambda g: -g,
    )


def mul(a, b) -> Tensor:
    return _binary(
        a, b, "mul", np.multiply,
        lambda a, b: lambda g: g * b.data,
        lambda a, b: lambda g: g * a.data,
    )


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out = Tensor(x.data * s)
    return _record(out, [(x, lambda g: g * s)])


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0  # subgradient at exactly 0 is 0
    return _record(out, [(x, lambda g: g * mask)])


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, [(x, lambda g: g * (1.0 - t * t))])


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s)
    return _record(out, [(x, lambda g: g * s * (1.0 - s))])


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.abs(x.data))
    sgn = np.sign(x.data)  # 0 at 0, matching the relu convention
    return _record(out, [(x, lambda g: g * sgn)])


def add_bias(x, b) -> Tensor:
    """Add a length-n bias vector to every row of an [m, n] matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: got matrix {x.shape} and bias {b.shape}")
    out = Tensor(x.data + b.data[None, :])
    return _record(out, [(x, lambda g: g), (b, lambda g: g.sum(axis=0))])


def scale_rows(x, w) -> Tensor:
    """Multiply row i of an [m, n] matrix by w[i]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"scale_rows: got matrix {x.shape} and weights {w.shape}")
    out = Tensor(x.data * w.data[:, None])
    return _record(out, [
        (x, lambda g: g * w.data[:, None]),
        (w, lambda g: (g * x.data).sum(axis=1)),
    ])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for rank-1/rank-2 operands.

    [m,k]x[k,n] -> [m,n]; [k]x[k,n] -> [n]; [m,k]x[k] -> [m];
    [k]x[k] -> scalar. Inner extents must match.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: expected rank 1 or 2, got {a.shape} and {b.shape}")
    ak = a.shape[-1]
    bk = b.shape[0]
    if ak != bk:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    ad, bd = a.data, b.data

    def vjp_a(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ bd.T
        if a.ndim == 1 and b.ndim == 2:
            return bd @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, bd)
        return g * bd

    def vjp_b(g):
        if a.ndim == 2 and b.ndim == 2:
            return ad.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return np.outer(ad, g)
        if a.ndim == 2 and b.ndim == 1:
            return ad.T @ g
        return g * ad

    return _record(out, [(a, vjp_a), (b, vjp_b)])


def outer(a, b) -> Tensor:
    """Outer product of two rank-1 tensors: out[i, j] = a[i] * b[j]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: expected two rank-1 tensors, got {a.shape} and {b.shape}")
    out = Tensor(np.outer(a.data, b.data))
    return _record(out, [
        (a, lambda g: g @ b.data),
        (b, lambda g: g.T @ a.data),
    ])


def batch_outer(a, b) -> Tensor:
    """Per-row outer products, flattened row-major: [B,m]x[B,n] -> [B,m*n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch_outer: got {a.shape} and {b.shape}")
    B, m = a.shape
    n = b.shape[1]
    out = Tensor((a.data[:, :, None] * b.data[:, None, :]).reshape(B, m * n))

    def vjp_a(g):
        return np.einsum("bmn,bn->bm", g.reshape(B, m, n), b.data)

    def vjp_b(g):
        return np.einsum("bmn,bm->bn", g.reshape(B, m, n), a.data)

    return _record(out, [(a, vjp_a), (b, vjp_b)])


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {x.shape}")
    out = Tensor(x.data.T.copy())
    return _record(out, [(x, lambda g: g.T)])


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    out = Tensor(x.data.reshape(shape))
    return _record(out, [(x, lambda g: g.reshape(old))])


def flatten(x) -> Tensor:
    return reshape(x, (as_tensor(x).size,))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty part list")
    nd = parts[0].ndim
    axis = axis % nd if nd else 0
    ref = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
        for d in range(nd):
            if d != axis and p.shape[d] != ref[d]:
                raise ShapeError(
                    f"concat: off-axis extent mismatch {tuple(ref)} vs {p.shape} on axis {d}"
                )
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))

    def make_vjp(start, stop):
        sl = [slice(None)] * nd
        sl[axis] = slice(start, stop)
        sl = tuple(sl)
        return lambda g: g[sl]

    recs = []
    off = 0
    for p in parts:
        w = p.shape[axis]
        recs.append((p, make_vjp(off, off + w)))
        off += w
    return _record(out, recs)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for {x.shape} axis {axis}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl].copy())
    in_shape = x.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[sl] = g
        return full

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        out = Tensor(x.data.sum())
        shape = x.shape
        return _record(out, [(x, lambda g: np.broadcast_to(g, shape))])
    axis = axis % x.ndim
    out = Tensor(x.data.sum(axis=axis))
    shape = x.shape

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return _record(out, [(x, vjp)])


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = Tensor(x.data.mean())
    shape = x.shape
    return _record(out, [(x, lambda g: np.broadcast_to(g / n, shape))])


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; entries sum to 1."""
    x = as_tensor(x)
    axis = axis % x.ndim if x.ndim else 0
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError(f"softmax: empty axis {axis} for shape {x.shape}")
    d = x.data
    if not np.all(np.isfinite(d)):
        raise ValueError("softmax: input contains non-finite entries")
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _record(out, [(x, vjp)])


def logsumexp(x, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``, reduced (keepdims=False)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ValueError(f"logsumexp: empty axis {axis} for shape {x.shape}")
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = Tensor(np.squeeze(m + np.log(tot), axis=axis))
    sm = e / tot

    def vjp(g):
        return np.expand_dims(g, axis) * sm

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# regularization


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate`` and scale
    survivors by 1/(1-rate) in training mode; identity in eval mode."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    mask = mask.astype(x.data.dtype)
    out = Tensor(x.data * mask)
    return _record(out, [(x, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# composites


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b for a [B,n] batch or a single [n] vector."""
    x = as_tensor(x)
    if x.ndim == 2:
        return add_bias(matmul(x, w), b)
    return add(matmul(x, w), b)
