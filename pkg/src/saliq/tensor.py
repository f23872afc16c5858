"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure mapping the output gradient to input gradients;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.

Broadcasting is deliberately narrow. Two operands of an elementwise op must
either have equal shapes, or one must be a scalar, a trailing suffix of the
other's shape (leading-batch), or have the same rank with some extents equal
to one (keepdims-style statistics). Anything else is a shape error.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor
        that requires grad. Grads add onto existing buffers; zero them between
        independent passes."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

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

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating):
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=np.float64) if isinstance(x, float) else x)


def _scalar_like(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        # python scalar kept as-is so numpy's weak-scalar rule preserves the other dtype
        t = Tensor.__new__(Tensor)
        t.data, t.requires_grad, t.grad = x, False, None
        t._parents, t._backward, t.name = (), None, None
        return t
    return as_tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(np.asarray(data))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _shape_of(x) -> tuple[int, ...]:
    return np.shape(x.data if isinstance(x, Tensor) else x)


def check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b:
        return
    if int(np.prod(a)) == 1 and len(a) <= len(b) or int(np.prod(b)) == 1 and len(b) <= len(a):
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _scalar_like(a), _scalar_like(b)
    sa, sb = _shape_of(a), _shape_of(b)
    check_broadcast(sa, sb, "add")
    ra, rb = a.requires_grad, b.requires_grad
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None))


def sub(a, b) -> Tensor:
    a, b = _scalar_like(a), _scalar_like(b)
    sa, sb = _shape_of(a), _shape_of(b)
    check_broadcast(sa, sb, "sub")
    ra, rb = a.requires_grad, b.requires_grad
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None, -_unbroadcast(g, sb) if rb else None))


def mul(a, b) -> Tensor:
    a, b = _scalar_like(a), _scalar_like(b)
    sa, sb = _shape_of(a), _shape_of(b)
    check_broadcast(sa, sb, "mul")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa) if ra else None,
                                             _unbroadcast(g * ad, sb) if rb else None))


def div(a, b) -> Tensor:
    a, b = _scalar_like(a), _scalar_like(b)
    sa, sb = _shape_of(a), _shape_of(b)
    check_broadcast(sa, sb, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(g / bd, sa) if ra else None,
                _unbroadcast(-g * out / bd, sb) if rb else None)

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def ste_round(a: Tensor) -> Tensor:
    """Round half away from zero; the backward pass is the identity."""
    return _make(round_half_away(a.data), (a,), lambda g: (g,))


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clamp ``x`` into ``[lo, hi]``; bounds may be tensors.

    Gradient is 1 w.r.t. ``x`` inside the interval and 0 outside; the bound
    that is active at an element receives that element's gradient.
    """
    x = _scalar_like(x)
    xd = x.data
    sx = _shape_of(x)
    parents = [x]
    below = np.zeros(np.shape(xd), dtype=bool)
    above = np.zeros(np.shape(xd), dtype=bool)
    out = np.array(xd, copy=True)
    lo_t = hi_t = None
    if lo is not None:
        lo_t = _scalar_like(lo)
        check_broadcast(sx, _shape_of(lo_t), "clamp")
        lo_b = np.broadcast_to(lo_t.data, np.shape(xd))
        below = xd < lo_b
        out = np.where(below, lo_b, out)
        parents.append(lo_t)
    if hi is not None:
        hi_t = _scalar_like(hi)
        check_broadcast(sx, _shape_of(hi_t), "clamp")
        hi_b = np.broadcast_to(hi_t.data, np.shape(xd))
        above = out > hi_b
        out = np.where(above, hi_b, out)
        below = below & ~above
        parents.append(hi_t)
    inside = ~(below | above)

    def backward(g):
        grads = [g * inside]
        if lo_t is not None:
            grads.append(_unbroadcast(g * below, _shape_of(lo_t)))
        if hi_t is not None:
            grads.append(_unbroadcast(g * above, _shape_of(hi_t)))
        return grads

    return _make(out.astype(np.result_type(xd), copy=False), parents, backward)


# -- shape ops --------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (..., m, k) @ (k, n) or matching leading batch dims."""
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2] or (b.ndim > 2 and sa[:-2] != sb[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    ad, bd = a.data, b.data

    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if ra else None
        gb = None
        if rb:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: weight shape {weight.shape} does not match {x.shape}")
    xd, wd = x.data, weight.data
    d = xd.shape[-1]
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * r

    def backward(g):
        wg = g * wd
        gx = r * wg - xd * r ** 3 * (wg * xd).sum(axis=-1, keepdims=True) / d
        gw = (g * xn).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _make(xn * wd, (x, weight), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    td = table.data

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return _make(td[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    x = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    n = t.size
    lsm = log_softmax_np(x)
    loss = -lsm[np.arange(n), t].mean()

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(n), t] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)
