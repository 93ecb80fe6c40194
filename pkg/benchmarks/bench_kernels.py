#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Times each kernel at the sizes the solver and the evaluation actually use,
then one end-to-end batched ODE solve with each kernel set swapped in.

Usage:
    python benchmarks/bench_kernels.py [--repeats R] [--batch B]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lsslnode import _kernels
from lsslnode.autodiff import Tensor, no_grad
from lsslnode.models import DynamicsNet
from lsslnode.odesolve import SolverConfig, odeint


def best_of(fn, repeats: int) -> float:
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng: np.random.Generator, batch: int) -> dict:
    n = batch * 64
    y = rng.normal(size=n)
    ks = rng.normal(size=(7, n))
    coeffs = rng.normal(size=5)
    err = rng.normal(size=n) * 1e-4
    pos = rng.normal(0.5, 1.0, size=200)
    neg = rng.normal(0.0, 1.0, size=800)
    return {
        "rk_combine": lambda k: k["rk_combine"](y, 0.1, ks, coeffs),
        "error_norm": lambda k: k["error_norm"](err, y, y + err, 1e-4, 1e-3),
        "mann_whitney_u": lambda k: k["mann_whitney_u"](pos, neg),
    }


def solve_case(rng: np.random.Generator, batch: int):
    f = DynamicsNet(rng)
    for p in f.parameters():
        p.data[...] = rng.normal(0.0, 0.3, size=p.data.shape)
    z0 = Tensor(rng.normal(size=(batch, 64)))
    t1 = rng.uniform(0.5, 2.5, size=batch)
    cfg = SolverConfig()

    def run():
        with no_grad():
            odeint(f, z0, np.zeros(batch), t1, cfg)

    return run


def swap(kernels: dict) -> None:
    for name, fn in kernels.items():
        setattr(_kernels, name, fn)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()
    if not _kernels.numba_kernels:
        raise SystemExit("numba kernels unavailable (LSSLNODE_NUMBA=0 or numba missing)")
    rng = np.random.default_rng(0)
    print(f"{'case':<16}{'numpy [us]':>12}{'numba [us]':>12}{'speedup':>9}")
    for name, case in kernel_cases(rng, args.batch).items():
        a = case(_kernels.numpy_kernels)
        b = case(_kernels.numba_kernels)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12), name
        t_np = best_of(lambda: case(_kernels.numpy_kernels), args.repeats)
        t_nb = best_of(lambda: case(_kernels.numba_kernels), args.repeats)
        print(f"{name:<16}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}")
    run = solve_case(rng, args.batch)
    original = {k: getattr(_kernels, k) for k in _kernels.numpy_kernels}
    try:
        swap(_kernels.numpy_kernels)
        t_np = best_of(run, max(3, args.repeats // 4))
        swap(_kernels.numba_kernels)
        t_nb = best_of(run, max(3, args.repeats // 4))
    finally:
        swap(original)
    print(f"{'odeint batch':<16}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}")


if __name__ == "__main__":
    main()
