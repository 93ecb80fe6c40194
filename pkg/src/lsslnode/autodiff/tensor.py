"""Define-by-run reverse-mode autodiff over dense float64 arrays.

Every op returns a new :class:`Tensor`. When grad mode is on and at least one
input requires a gradient, the output remembers its parents and a closure
that pushes the output cotangent back to them. ``backward`` walks the
recorded graph once in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "custom_op",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "square",
    "scale_rows",
    "concat",
    "stack_rows",
    "tsum",
    "tmean",
    "cosine_similarity",
    "mse",
    "cross_entropy",
    "backward",
    "grad",
]

_GRAD_ENABLED = True
COS_EPS = 1e-8
LEAKY_SLOPE = 0.01


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d float64 array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ValueError("tensor dimensions must be positive")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only single-element tensors can be converted to a python float")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, index) -> Tensor:
        return _getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _binary_prep(a, b, op: str) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def custom_op(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Register an op whose value and vector-Jacobian product come from outside.

    ``backward_fn(g)`` must return one cotangent (or None) per parent.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn, op)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = x.data
    pos = d > 0
    y = np.where(pos, d, slope * d)
    return _make(y, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * d * g,), "square")


def scale_rows(x: Tensor, s) -> Tensor:
    """Multiply row ``i`` of a 2-d tensor by the constant ``s[i]``."""
    col = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    if x.ndim != 2 or col.shape[0] != x.shape[0]:
        raise ValueError(f"scale_rows: {x.shape} rows vs {col.shape[0]} scales")
    return _make(x.data * col, (x,), lambda g: (g * col,), "scale_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [n, in] or [in]; bias added per row."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: dimension mismatch {x.shape} @ {w.shape}")
    y = xd @ wd
    if b is not None:
        y = y + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)
    vec = xd.ndim == 1

    def bw(g):
        gx = g @ wd.T
        gw = np.outer(xd, g) if vec else xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, (g if vec else g.sum(axis=0))

    return _make(y, parents, bw, "linear")


# ---------------------------------------------------------------- structure


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(x.data[index], dtype=np.float64), (x,), bw, "getitem")


def _fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def _reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors]),
        tuple(tensors),
        lambda g: tuple(g[i] for i in range(n)),
        "stack_rows",
    )


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def tmean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COS_EPS) -> Tensor:
    """Cosine along the last axis with each norm floored at ``eps``.

    Either argument may be [d] or [n, d]; a [d] argument is shared by all rows.
    Returns a scalar for two vectors, otherwise shape [n].
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1] or a.ndim > 2 or b.ndim > 2:
        raise ValueError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] != b.shape[0]:
        raise ValueError(f"cosine_similarity: row mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    da = np.maximum(na, eps)
    db = np.maximum(nb, eps)
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    cos = dot / (da * db)

    def bw(g):
        g = np.asarray(g).reshape(cos.shape)
        # d/dn of 1/max(n, eps) vanishes below eps
        ca = np.where(na > eps, cos / (da * da), 0.0)
        cb = np.where(nb > eps, cos / (db * db), 0.0)
        ga = g * (bd / (da * db) - ca * ad)
        gb = g * (ad / (da * db) - cb * bd)
        if a.ndim == 1 and ga.ndim == 2:
            ga = ga.sum(axis=0)
        if b.ndim == 1 and gb.ndim == 2:
            gb = gb.sum(axis=0)
        return ga, gb

    out = cos.reshape(()) if cos.size == 1 and a.ndim == 1 and b.ndim == 1 else cos[..., 0]
    return _make(out, (a, b), bw, "cosine")


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return _make(np.asarray((diff * diff).mean()), (a, b), bw, "mse")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of [n, c] logits against integer class labels."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ValueError(f"cross_entropy: logits {z.shape} vs targets {targets.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = z.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- traversal


def _toposort(root: Tensor) -> list[Tensor]:
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


def _run(root: Tensor, seed: np.ndarray, keep: set[int], release: bool) -> dict[int, np.ndarray]:
    """Reverse sweep from ``root``; returns cotangents for leaves and ``keep`` ids."""
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        fn = node._backward
        if fn is None:
            continue
        g = grads.get(id(node))
        if g is not None:
            for p, pg in zip(node._parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
            if id(node) not in keep:
                del grads[id(node)]
        if release:
            node._parents = ()
            node._backward = None
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the graph")
    leaves = [n for n in _toposort(loss) if n._backward is None]
    grads = _run(loss, np.ones(loss.shape), set(), release=True)
    for leaf in leaves:
        g = grads.get(id(leaf))
        g = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(output: Tensor, inputs: Iterable[Tensor], grad_output=None) -> list[np.ndarray]:
    """Vector-Jacobian product of ``output`` against ``inputs``.

    Leaves' ``.grad`` fields are not touched and the graph is kept, so the
    same output can be differentiated again.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        seed = np.ones(output.shape)
    else:
        seed = np.asarray(grad_output, dtype=np.float64).reshape(output.shape)
    if not output.requires_grad:
        return [np.zeros(t.shape) for t in inputs]
    grads = _run(output, seed, {id(t) for t in inputs}, release=False)
    return [
        np.asarray(grads[id(t)], dtype=np.float64).reshape(t.shape) if id(t) in grads else np.zeros(t.shape)
        for t in inputs
    ]
