"""Dense float64 tensors with a reverse-mode tape.

Every forward primitive returns a new :class:`Tensor`. When gradient
recording is enabled and at least one input requires a gradient, the
result remembers its parents, a backward closure and a global sequence
number. :func:`backward` collects the ops reachable from a scalar root into
a :class:`Tape`, ordered by that sequence number, and replays them in exact
reverse execution order.

Broadcasting is deliberately narrow: a binary op accepts either identical
shapes or a second operand whose shape equals the trailing dims of the
first (the "leading batch dims" case). Anything else must be spelled out
with :func:`expand` or :func:`reshape`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_sequence = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        dims = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {dims}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""

    def __init__(self, op: str, detail: str = "non-finite value produced"):
        self.op = op
        super().__init__(f"{op}: {detail}")


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Only leaves keep a persistent buffer; intermediates get theirs via the tape.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._seq = -1
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _wrap(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str,
              check: bool = True) -> Tensor:
    """Wrap a forward result as a tape node.

    ``backward(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent.
    """
    if check and not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_sequence)
    return out


class Tape:
    """Ops reachable from a root, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf's ``grad``."""
    if root.data.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    if not root.requires_grad:
        return
    if root.is_leaf:
        root.grad += 1.0
        return
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(Tape.from_root(root).nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad += pg
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- helpers

def _trailing(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    """Number of leading axes to reduce for (a, b) under leading-dim broadcast."""
    if a.shape == b.shape:
        return 0, 0
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return 0, a.ndim - b.ndim
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return b.ndim - a.ndim, 0
    raise ShapeError(op, a.shape, b.shape)


def _reduce_leading(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape((-1,) + g.shape[n:]).sum(axis=0) if n else g


# ------------------------------------------------------------ primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _trailing("add", a, b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_reduce_leading(g, ra), _reduce_leading(g, rb)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ra, rb = _trailing("mul", a, b)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b),
                     lambda g: (_reduce_leading(g * bd, ra), _reduce_leading(g * ad, rb)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or same-batch ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def bwd(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb
    elif a.shape[:-2] == b.shape[:-2]:
        def bwd(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb
    else:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims differ")
    return custom_op(ad @ bd, (a, b), bwd, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))
    return custom_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd, "concat")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def bwd(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)
    return custom_op(a.data[index], (a,), bwd, "slice", check=False)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return custom_op(data, (a,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),),
                     "transpose", check=False)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 or missing leading axes to ``shape``."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("expand", a.shape, shape) from None
    lead = len(shape) - a.ndim
    keep = tuple(i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def bwd(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        return (g.sum(axis=keep, keepdims=True) if keep else g,)
    return custom_op(np.array(data), (a,), bwd, "expand", check=False)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return custom_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a learned gain and bias."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = x.ndim - 1

    def bwd(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, _reduce_leading(g * xhat, lead), _reduce_leading(g, lead)
    return custom_op(xhat * gd + beta.data, (x, gamma, beta), bwd, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, detail="id out of range")
    shape = table.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)
    return custom_op(table.data[ids], (table,), bwd, "embedding", check=False)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; masked entries are exactly zero.

    A row with no admissible entry produces all zeros rather than NaN.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("masked_softmax", x.shape, mask.shape)
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return custom_op(y, (x,), bwd, "masked_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    y = x.data - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    return custom_op(y, (x,), bwd, "log_softmax")


def cross_entropy(log_probs: Tensor, targets, weights=None) -> Tensor:
    """Summed negative log-likelihood of integer ``targets`` under ``log_probs``.

    ``weights`` (same shape as ``targets``) scales each position; padding is
    excluded by giving it weight zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", log_probs.shape, targets.shape)
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    picked = np.take_along_axis(log_probs.data, targets[..., None], axis=-1)[..., 0]
    shape = log_probs.shape

    def bwd(g):
        out = np.zeros(shape)
        np.put_along_axis(out, targets[..., None], (-g * w)[..., None], axis=-1)
        return (out,)
    return custom_op(np.asarray(-(picked * w).sum()), (log_probs,), bwd, "cross_entropy")


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return custom_op(np.asarray(a.data.sum()), (a,),
                         lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % a.ndim
    return custom_op(a.data.sum(axis=ax), (a,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return custom_op(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
