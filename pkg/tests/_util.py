"""Shared helpers for the test suite: finite differences and small reference nets."""

from __future__ import annotations

import numpy as np

from lsslnode.autodiff import (
    Tensor,
    backward,
    concat,
    cosine_similarity,
    cross_entropy,
    leaky_relu,
    linear,
    matmul,
    mse,
    scale_rows,
    sigmoid,
    square,
    stack_rows,
    tanh,
    tmean,
    tsum,
)
from lsslnode.models import Dense, Module


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(fn, arrays: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``fn(*arrays)`` with respect to every array."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            hi = fn(*arrays)
            flat[k] = keep - eps
            lo = fn(*arrays)
            flat[k] = keep
            gf[k] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 10, x)


# name -> (input builder, forward over Tensors)
OP_CASES = {
    "add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a + b),
    "add_scalar": (lambda r: [r.normal(size=(3, 4)), r.normal(size=())], lambda a, b: a + b),
    "sub": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a - b),
    "mul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], lambda a, b: a * b),
    "mul_scalar": (lambda r: [r.normal(size=(2, 5)), r.normal(size=())], lambda a, b: a * b),
    "neg_div": (lambda r: [r.normal(size=(4,))], lambda a: -a / 3.0),
    "tanh": (lambda r: [r.normal(size=(3, 4))], tanh),
    "sigmoid": (lambda r: [r.normal(scale=3.0, size=(3, 4))], sigmoid),
    "leaky_relu": (lambda r: [_away_from_zero(r, (3, 4))], leaky_relu),
    "square": (lambda r: [r.normal(size=(3, 4))], square),
    "scale_rows": (lambda r: [r.normal(size=(4, 3))], lambda a: scale_rows(a, np.array([0.5, -1.0, 2.0, 0.0]))),
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], matmul),
    "linear": (lambda r: [r.normal(size=(5, 3)), r.normal(size=(3, 2)), r.normal(size=(2,))], linear),
    "linear_vec": (lambda r: [r.normal(size=(3,)), r.normal(size=(3, 2)), r.normal(size=(2,))], linear),
    "slice": (lambda r: [r.normal(size=(4, 6))], lambda a: a[1:3, ::2]),
    "fancy_index": (lambda r: [r.normal(size=(5, 2))], lambda a: a[np.array([0, 3, 3, 1])]),
    "reshape": (lambda r: [r.normal(size=(3, 4))], lambda a: a.reshape(2, 6)),
    "concat": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4))], lambda a, b: concat([a, b], axis=-1)),
    "concat_rows": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))], lambda a, b: concat([a, b], axis=0)),
    "stack_rows": (lambda r: [r.normal(size=(3,)), r.normal(size=(3,))], lambda a, b: stack_rows([a, b])),
    "tsum": (lambda r: [r.normal(size=(3, 4))], tsum),
    "tmean": (lambda r: [r.normal(size=(3, 4))], tmean),
    "cosine_rows": (lambda r: [r.normal(size=(4, 5)), r.normal(size=(4, 5))], cosine_similarity),
    "cosine_shared": (lambda r: [r.normal(size=(4, 5)), r.normal(size=(5,))], cosine_similarity),
    "cosine_vec": (lambda r: [r.normal(size=(6,)), r.normal(size=(6,))], cosine_similarity),
    "mse": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], mse),
    "cross_entropy": (lambda r: [r.normal(scale=2.0, size=(4, 5))],
                      lambda a: cross_entropy(a, np.array([0, 4, 2, 2]))),
}


def check_op(name: str, seed: int) -> float:
    """Worst relative error between analytic and numeric gradients for one op and seed."""
    build, forward = OP_CASES[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    inputs = build(rng)
    proj = None

    def scalar(*arrays):
        nonlocal proj
        out = forward(*[Tensor(a) for a in arrays]).data
        if proj is None:
            proj = np.random.default_rng(seed).normal(size=out.shape)
        return float(np.sum(out * proj))

    scalar(*inputs)  # fixes the projection
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = forward(*leaves)
    loss = tsum(out * Tensor(proj)) if out.ndim else out * float(proj)
    backward(loss)
    numeric = numeric_grad(scalar, [a.copy() for a in inputs])
    return max(rel_err(leaf.grad, num) for leaf, num in zip(leaves, numeric))


class TanhNet(Module):
    """Small time-dependent dynamics ``W2 tanh(W1 [z, t] + b1) + b2`` with random weights."""

    def __init__(self, rng: np.random.Generator, dim: int = 3, hidden: int = 8, scale: float = 0.8):
        self.fc1 = Dense(dim + 1, hidden, rng)
        self.fc2 = Dense(hidden, dim, rng)
        for p in self.parameters():
            p.data[...] = rng.normal(0.0, scale / np.sqrt(max(p.data.shape[0], 1)), size=p.data.shape)

    def __call__(self, t, z: Tensor) -> Tensor:
        if z.ndim == 1:
            tcol = Tensor(np.array([float(t)]))
        else:
            tcol = Tensor(np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],)).reshape(-1, 1))
        return self.fc2(tanh(self.fc1(concat([z, tcol], axis=-1))))


def set_params(module: Module, flat: np.ndarray) -> None:
    k = 0
    for p in module.parameters():
        n = p.data.size
        p.data[...] = flat[k : k + n].reshape(p.data.shape)
        k += n


def get_params(module: Module) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in module.parameters()])
