"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array-valued quantity in the package (latents, noise, activations,
parameters) is a :class:`Tensor`. Operations record a node whenever an
input requires grad; :func:`backward` replays the recorded nodes in exact
reverse order of creation.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sin",
    "sum",
    "mean",
    "softmax",
    "attention_scores",
    "gather",
    "scatter_add",
    "gelu",
    "silu",
    "sigmoid",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_seq = itertools.count()
_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """A float64 array plus optional gradient tracking.

    ``data`` is never mutated by operations; optimizers replace it wholesale.
    ``grad`` accumulates with ``+=`` across backward calls until the caller
    resets it with :meth:`zero_grad`.
    """

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _slice(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node = None
    t.requires_grad = False
    if _grad_enabled and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = Node(op, inputs, bw)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _record("silu", ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * x2))
    out = 1.0 + t
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        d = 1.0 - t * t
        d *= x * (_GELU_C + (3 * _GELU_C * 0.044715) * x2)
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _record("gelu", out, (a,), bw)


def gated_gelu(a, b) -> Tensor:
    """Fused ``gelu(a) * b`` (tanh GELU), the GeGLU gating product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("gated_gelu", a.shape, b.shape)
    x, y = a.data, b.data
    x2 = x * x
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * x2))
    act = 1.0 + t
    act *= x
    act *= 0.5
    out = act * y

    def bw(g):
        gb = g * act if b.requires_grad else None
        ga = None
        if a.requires_grad:
            ga = 1.0 - t * t
            ga *= x * (_GELU_C + (3 * _GELU_C * 0.044715) * x2)
            ga += 1.0 + t
            ga *= 0.5
            ga *= g
            ga *= y
        return ga, gb

    return _record("gated_gelu", out, (a, b), bw)


def rms_normalize(a, eps: float = 1e-6) -> Tensor:
    """Fused ``x / sqrt(mean(x^2, -1) + eps)`` over the last axis."""
    a = as_tensor(a)
    x = a.data
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x * r

    def bw(g):
        gy = g * y
        gx = y * gy.mean(axis=-1, keepdims=True)
        np.subtract(g, gx, out=gx)
        gx *= r
        return (gx,)

    return _record("rms_normalize", y, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept) / n, shape).copy(),)

    return _record("mean", np.asarray(out), (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; ``-inf`` logits map to exact zeros."""
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands rank >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: one flat GEMM instead of a batch loop
        k, n = bd.shape
        flat = ad.reshape(-1, k)
        out = (flat @ bd).reshape(ad.shape[:-1] + (n,))

        def bw_flat(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", out, (a, b), bw_flat)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", np.matmul(ad, bd), (a, b), bw)


def attention_scores(q, k, v, bias: np.ndarray | None = None, scale: float | None = None) -> Tensor:
    """Fused ``softmax(q k^T * scale + bias) v`` over the last two axes.

    ``bias`` is a constant additive logit offset (``-inf`` hides a key). It
    broadcasts against the scores, or against the scores viewed with the
    query axis split as ``(..., groups, Lq // groups, Lk)`` when it carries
    one extra axis (grouped query heads folded into the query axis).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[:-1] != v.shape[:-1] or q.ndim < 2 or k.ndim < 2:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / np.sqrt(d) if scale is None else scale
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2])
    lq, lk = q.shape[-2], k.shape[-2]
    qs = np.broadcast_to(q.data * scale, lead + q.shape[-2:])
    kd = np.broadcast_to(k.data, lead + k.shape[-2:])
    vd = np.broadcast_to(v.data, lead + v.shape[-2:])
    grouped = bias is not None and bias.ndim == len(lead) + 3
    if bias is not None:
        tail = bias.shape[-3:] if grouped else (lq, lk)
        bias = np.broadcast_to(bias, lead + (bias.shape[-3] if grouped else 1,) * grouped + tail[-2:])
    # work one (batch, head) slice at a time so the score block stays in cache
    p = np.empty(lead + (lq, lk))
    out = np.empty(lead + (lq, v.shape[-1]))
    for idx in np.ndindex(*lead):
        s = p[idx]
        np.matmul(qs[idx], kd[idx].T, out=s)
        if grouped:
            s.reshape(-1, bias.shape[-2], lk)[...] += bias[idx]
        elif bias is not None:
            s += bias[idx]
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        np.matmul(s, vd[idx], out=out[idx])

    def bw(g):
        g = np.broadcast_to(g, out.shape)
        gq = np.empty(lead + qs.shape[-2:]) if q.requires_grad else None
        gk = np.empty(lead + kd.shape[-2:]) if k.requires_grad else None
        gv = np.empty(lead + vd.shape[-2:]) if v.requires_grad else None
        for idx in np.ndindex(*lead):
            s, gi = p[idx], g[idx]
            if gv is not None:
                np.matmul(s.T, gi, out=gv[idx])
            ds = gi @ vd[idx].T
            ds *= s
            ds -= s * ds.sum(axis=-1, keepdims=True)
            if gq is not None:
                np.matmul(ds, kd[idx], out=gq[idx])
            if gk is not None:
                np.matmul(ds.T, qs[idx], out=gk[idx])
        return (
            None if gq is None else _unbroadcast(gq, q.shape) * scale,
            None if gk is None else _unbroadcast(gk, k.shape),
            None if gv is None else _unbroadcast(gv, v.shape),
        )

    return _record("attention", out, (q, k, v), bw)


def rotate_pairs(a) -> Tensor:
    """Quarter turn of each channel pair: ``(x0, x1) -> (-x1, x0)`` on the last axis."""
    a = as_tensor(a)
    if not a.ndim or a.shape[-1] % 2:
        raise ShapeError("rotate_pairs", a.shape, detail="last axis must be even")
    x = a.data
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]

    def bw(g):
        gi = np.empty_like(g)
        gi[..., 0::2] = g[..., 1::2]
        gi[..., 1::2] = -g[..., 0::2]
        return (gi,)

    return _record("rotate_pairs", out, (a,), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape, detail="rank < 2")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", detail="no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *(u.shape for u in ts), detail=f"axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _record("concat", out, ts, bw)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def _slice(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    shape = a.shape
    advanced = _is_advanced(index)

    def bw(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record("slice", np.array(out), (a,), bw)


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select entries of ``a`` along ``axis`` by integer ``indices`` (any shape)."""
    a = as_tensor(a)
    idx = np.asarray(indices.data if isinstance(indices, Tensor) else indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise ShapeError("gather", a.shape, idx.shape, detail="index out of range")
    out = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _record("gather", out, (a,), bw)


def scatter_add(base, indices, src, axis: int = 0) -> Tensor:
    """Return ``base`` with rows of ``src`` added at ``indices`` along ``axis``."""
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % base.ndim
    if idx.ndim != 1 or src.shape[ax] != idx.size or any(
        src.shape[i] != base.shape[i] for i in range(base.ndim) if i != ax
    ):
        raise ShapeError("scatter_add", base.shape, idx.shape, src.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[ax]):
        raise ShapeError("scatter_add", base.shape, idx.shape, detail="index out of range")
    out = base.data.copy()
    np.add.at(np.moveaxis(out, ax, 0), idx, np.moveaxis(src.data, ax, 0))

    def bw(g):
        return g, (np.take(g, idx, axis=ax) if src.requires_grad else None)

    return _record("scatter_add", out, (base, src), bw)


# ---------------------------------------------------------------------------
# graph and backward
# ---------------------------------------------------------------------------


class Graph:
    """The ordered record of operations reachable from a root tensor."""

    def __init__(self, nodes: list[Node], outputs: dict[int, Tensor]):
        self.nodes = nodes
        self._outputs = outputs

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        nodes: dict[int, Node] = {}
        outputs: dict[int, Tensor] = {}
        stack = [root]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is not None:
                nodes[id(t.node)] = t.node
                outputs[id(t.node)] = t
                stack.extend(i for i in t.node.inputs if i.requires_grad)
        ordered = sorted(nodes.values(), key=lambda n: n.seq)
        return cls(ordered, outputs)

    def output_of(self, node: Node) -> Tensor:
        return self._outputs[id(node)]

    def __len__(self) -> int:
        return len(self.nodes)

    def backward_order(self) -> Iterable[Node]:
        return reversed(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
            return
        raise ValueError("backward: root was not produced by a recorded operation")
    graph = Graph.trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in graph.backward_order():
        out = graph.output_of(node)
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
