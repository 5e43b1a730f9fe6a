"""Minimal dense-tensor arithmetic with reverse-mode gradient tracing.

Just enough of an autodiff engine to differentiate every loss and encoder in
this package: dense float arrays, a small primitive set closed under the
contrastive losses, and a tape built by topologically ordering the graph
under a scalar output.  Reductions accumulate in float64 regardless of the
storage dtype; 64-bit storage everywhere is the test/oracle configuration.

No global state: every op is a pure function of its inputs, so independent
graphs may be built and differentiated on different threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_FLOOR = 1e-8  # relative-error denominator floor in grad_check


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


def _as_array(data, dtype=None) -> np.ndarray:
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if not np.issubdtype(a.dtype, np.floating):
        return a.astype(np.float64)
    return a


class Tensor:
    """A dense real array plus the bookkeeping for reverse-mode tracing.

    ``grad`` is populated (same shape as ``data``) for every requires-grad
    tensor reached by :func:`backward`.  Tensors created from ops that have
    no differentiable parents carry no graph linkage at all, which keeps
    constant subtrees out of the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's storage."""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar -------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- method sugar ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Topological record of the primitive ops under one scalar output.

    Replaying the record in reverse order propagates gradients from the
    output to every requires-grad leaf.  The record is dropped after
    :meth:`backward`, releasing the graph.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._order = order
        self._root = root

    def backward(self):
        if self._order is None:
            raise RuntimeError("tape already consumed")
        root = self._root
        if root.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self._order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        # Drop intermediate linkage so the graph can be collected.
        for node in self._order:
            if node._backward_fn is not None:
                node._parents = ()
                node._backward_fn = None
                if not node.requires_grad:
                    node.grad = None
        self._order = None


def backward(out: Tensor):
    """Differentiate the scalar ``out`` w.r.t. every requires-grad leaf."""
    Tape(out).backward()


# ---------------------------------------------------------------------------
# primitive construction helpers
# ---------------------------------------------------------------------------


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad or p._parents)
    if live:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    # Restricted shape algebra: same shape, scalar-tensor, or a size-1 axis.
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data)

    def back(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), back)


def neg(a) -> Tensor:
    a = _lift(a)

    def back(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), back)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul expects [n,k] @ [k,m], got {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")

    def back(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), back)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.dtype)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n
    out = np.asarray(out, dtype=a.dtype)

    def back(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), back)


def dot(a, b, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Row-wise inner product along ``axis``."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot expects equal shapes, got {a.shape} and {b.shape}")
    out = np.sum(a.data * b.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=a.dtype)

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(out, (a, b), back)


def l2_norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; gradient is 0 for a zero vector."""
    a = _lift(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True, dtype=np.float64))
    norm = norm.astype(a.dtype)
    out = norm if keepdims else np.squeeze(norm, axis=axis)

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        _accumulate(a, g * a.data / safe)

    return _make(out, (a,), back)


def logsumexp(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Stable log-sum-exp; its backward pass is the softmax along ``axis``."""
    a = _lift(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(a.data - m), axis=axis, keepdims=True, dtype=np.float64)
    lse = (m + np.log(s)).astype(a.dtype)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * np.exp(a.data - lse))

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# elementwise transcendental / nonlinear
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out)

    return _make(out, (a,), back)


def log(a) -> Tensor:
    a = _lift(a)

    def back(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), back)


def arctanh(a) -> Tensor:
    """0.5 * (log1p(x) - log1p(-x)); callers clamp |x| below 1 first."""
    a = _lift(a)
    out = 0.5 * (np.log1p(a.data) - np.log1p(-a.data))

    def back(g):
        _accumulate(a, g / (1.0 - a.data * a.data))

    return _make(out, (a,), back)


def sqrt(a) -> Tensor:
    """Square root with subgradient 0 at 0 (same convention as relu)."""
    a = _lift(a)
    out = np.sqrt(a.data)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        _accumulate(a, np.where(out > 0, 0.5 * g / safe, 0.0))

    return _make(out, (a,), back)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def back(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), back)


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the bounds."""
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def back(g):
        _accumulate(a, g * inside)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def take(a, key) -> Tensor:
    """Slice / fancy-index ``a``; the backward pass scatter-adds."""
    a = _lift(a)
    out = a.data[key]

    def back(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _accumulate(a, buf)

    return _make(np.array(out, copy=True), (a,), back)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    orig = a.data.shape

    def back(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), back)


def conv3x3(x, w, b) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1: [B,C,H,W] -> [B,F,H,W]."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 expects x[B,C,H,W], w[F,C,3,3]; got {x.shape}, {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.einsum("bcijuv,fcuv->bfij", win, w.data, optimize=True) + b.data[None, :, None, None]

    def back(g):
        _accumulate(b, g.sum(axis=(0, 2, 3)))
        _accumulate(w, np.einsum("bcijuv,bfij->fcuv", win, g, optimize=True))
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(2, 3))
        wf = w.data[:, :, ::-1, ::-1]
        _accumulate(x, np.einsum("bfijuv,fcuv->bcij", gwin, wf, optimize=True))

    return _make(out, (x, w, b), back)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between traced and central-difference gradients.

    ``f`` must map a single tensor to a scalar tensor and be re-evaluable.
    The relative error uses max(|analytic|, |numeric|, 1e-8) per coordinate.
    Works on a private copy, so arrays the caller closed over never move.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x) if leaf.grad is None else np.asarray(leaf.grad)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(Tensor(x.copy())).data)
        flat[k] = orig - h
        fm = float(f(Tensor(x.copy())).data)
        flat[k] = orig
        nflat[k] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _GRAD_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))
