"""Adaptive Dormand-Prince 5(4) integration of learned dynamics.

Dynamics are callables ``f(t, z) -> Tensor`` built from autodiff ops. ``t`` is
a float, or an array with one time per row when a batch is integrated with
per-sample horizons. A dynamics object may expose ``parameters()``; those
tensors receive gradients from the adjoint pass.

Two gradient routes exist for :func:`odeint`:

* ``"adjoint"`` (default): the forward solve records nothing; the backward
  pass integrates the augmented state ``[z, a, a df/dtheta]`` from ``t1`` to
  ``t0`` with the same solver.
* ``"direct"``: the accepted step sequence is replayed with autodiff ops so
  ordinary backprop runs through every stage. Used as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .autodiff import Tensor, custom_op, grad, no_grad, scale_rows

__all__ = [
    "SolverConfig",
    "SolverError",
    "OdeSolution",
    "DynamicsFn",
    "dopri5_step",
    "integrate",
    "integrate_batch",
    "integrate_adjoint_backward",
    "odeint",
]

DynamicsFn = Callable[[object, Tensor], Tensor]

# Dormand & Prince (1980) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class SolverError(RuntimeError):
    """Integration could not complete (non-finite stage, step underflow, step budget)."""


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-3
    atol: float = 1e-4
    first_step: float | None = None
    max_steps: int = 10000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    order: int = 5

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if not self.min_factor < 1.0 < self.max_factor:
            raise ValueError("step-factor clamp must bracket 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass
class OdeSolution:
    times: np.ndarray
    states: list[Tensor]
    n_accepted: int = 0
    n_rejected: int = 0
    n_fevals: int = 0
    steps: list[tuple[float, float]] = field(default_factory=list, repr=False)

    @property
    def final(self) -> Tensor:
        return self.states[-1]

    def stats(self) -> dict[str, int]:
        return {"accepted": self.n_accepted, "rejected": self.n_rejected, "fevals": self.n_fevals}


def _parameters(f) -> list[Tensor]:
    params = getattr(f, "parameters", None)
    return list(params()) if callable(params) else []


def _as_array(out, shape) -> np.ndarray:
    arr = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if arr.shape != shape:
        arr = np.broadcast_to(arr, shape)
    return arr


def _numpy_rhs(f: DynamicsFn, shape: tuple[int, ...]) -> Callable[[float, np.ndarray], np.ndarray]:
    def rhs(t, y):
        with no_grad():
            out = f(t, Tensor(y.reshape(shape)))
        return np.ascontiguousarray(_as_array(out, shape), dtype=np.float64).reshape(-1)

    return rhs


# ---------------------------------------------------------------- core stepping


def _stages(rhs, t: float, y: np.ndarray, h: float, k1: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ks = np.empty((7, y.shape[0]))
    ks[0] = k1
    for i in range(1, 6):
        yi = _kernels.rk_combine(y, h, ks, _A[i - 1])
        ks[i] = rhs(t + _C[i] * h, yi)
        if not np.isfinite(ks[i]).all():
            raise SolverError(f"non-finite dynamics value in stage {i + 1} at t={t:.6g}, h={h:.3g}")
    y5 = _kernels.rk_combine(y, h, ks, _A[5])
    ks[6] = rhs(t + h, y5)
    if not np.isfinite(ks[6]).all():
        raise SolverError(f"non-finite dynamics value in stage 7 at t={t:.6g}, h={h:.3g}")
    err = h * (_E @ ks)
    return y5, err, ks[6]


def _initial_step(rhs, t0: float, y0: np.ndarray, f0: np.ndarray, direction_span: float, cfg: SolverConfig) -> float:
    scale = cfg.atol + np.abs(y0) * cfg.rtol
    d0 = math.sqrt(np.mean((y0 / scale) ** 2))
    d1 = math.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = math.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / cfg.order)
    return min(100 * h0, h1, direction_span)


def _solve(rhs, y0: np.ndarray, t0: float, t1: float, cfg: SolverConfig, t_eval: Sequence[float]):
    """Integrate a flat numpy system; returns (states at t_eval, stats, accepted steps)."""
    y = y0.copy()
    t = t0
    out = []
    stats = {"accepted": 0, "rejected": 0, "fevals": 0}
    steps: list[tuple[float, float]] = []
    targets = list(t_eval)
    while targets and targets[0] <= t0:
        out.append(y.copy())
        targets.pop(0)
    if not targets:
        return out, stats, steps
    span = t1 - t0
    min_h = 1e-12 * span
    f0 = rhs(t, y)
    stats["fevals"] += 1
    if not np.isfinite(f0).all():
        raise SolverError(f"non-finite dynamics value at t={t:.6g}")
    if cfg.first_step is not None:
        h = min(cfg.first_step, span)
    else:
        h = _initial_step(rhs, t, y, f0, span, cfg)
        stats["fevals"] += 1
    attempts = 0
    while targets:
        target = targets[0]
        if attempts >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g} (target {t1:.6g})")
        if h < min_h:
            raise SolverError(f"step size underflow (h={h:.3g}) at t={t:.6g}")
        attempts += 1
        last = t + h >= target
        h_try = target - t if last else h
        y_new, err, f_new = _stages(rhs, t, y, h_try, f0)
        stats["fevals"] += 6
        norm = _kernels.error_norm(err, y, y_new, cfg.atol, cfg.rtol)
        if norm == 0.0:
            factor = cfg.max_factor
        else:
            factor = min(cfg.max_factor, max(cfg.min_factor, cfg.safety * norm ** (-1.0 / cfg.order)))
        if norm <= 1.0:
            steps.append((t, h_try))
            stats["accepted"] += 1
            t = target if last else t + h_try
            y = y_new
            f0 = f_new
            if last:
                out.append(y.copy())
                targets.pop(0)
            # a truncated final step says nothing about the natural step size
            h = max(h, h_try) * factor if last else h_try * factor
        else:
            stats["rejected"] += 1
            h = h_try * min(1.0, factor)
    return out, stats, steps


def dopri5_step(f: DynamicsFn, t: float, z: Tensor, h: float) -> tuple[Tensor, Tensor]:
    """One Dormand-Prince step; returns the 5th-order state and the 5th-minus-4th error."""
    if h <= 0:
        raise ValueError("step size must be positive")
    z = z if isinstance(z, Tensor) else Tensor(z)
    shape = z.shape
    y = z.data.reshape(-1).astype(np.float64)
    rhs = _numpy_rhs(f, shape)
    k1 = rhs(t, y)
    if not np.isfinite(k1).all():
        raise SolverError(f"non-finite dynamics value in stage 1 at t={t:.6g}")
    y5, err, _ = _stages(rhs, t, y, h, k1)
    return Tensor(y5.reshape(shape)), Tensor(err.reshape(shape))


def integrate(f: DynamicsFn, z0: Tensor, t0: float, t1: float, cfg: SolverConfig | None = None,
              t_eval: Sequence[float] | None = None) -> OdeSolution:
    """Solve ``dz/dt = f(t, z)`` from ``t0`` to ``t1`` (no autodiff recording)."""
    cfg = cfg or SolverConfig()
    t0, t1 = float(t0), float(t1)
    if t1 < t0:
        raise ValueError(f"integration runs forward in time only (t0={t0}, t1={t1})")
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    times = np.array([t0, t1] if t_eval is None else list(t_eval), dtype=np.float64)
    if np.any(np.diff(times) < 0) or times[0] < t0 or times[-1] > t1:
        raise ValueError("t_eval must be ascending and inside [t0, t1]")
    shape = z0.shape
    y0 = np.ascontiguousarray(z0.data, dtype=np.float64).reshape(-1)
    ys, stats, steps = _solve(_numpy_rhs(f, shape), y0, t0, t1, cfg, times)
    return OdeSolution(
        times=times,
        states=[Tensor(y.reshape(shape)) for y in ys],
        n_accepted=stats["accepted"],
        n_rejected=stats["rejected"],
        n_fevals=stats["fevals"],
        steps=steps,
    )


# ---------------------------------------------------------------- batched horizons


class RescaledDynamics:
    """Maps per-row horizons onto a shared ``s in [0, 1]``.

    Row ``i`` follows ``dz/ds = span_i * f(t0_i + s * span_i, z)``.
    """

    def __init__(self, f: DynamicsFn, t0s, t1s):
        self.f = f
        self.t0s = np.asarray(t0s, dtype=np.float64).reshape(-1)
        self.spans = np.asarray(t1s, dtype=np.float64).reshape(-1) - self.t0s
        if np.any(self.spans < 0):
            raise ValueError("every horizon must satisfy t1 >= t0")

    def parameters(self) -> list[Tensor]:
        return _parameters(self.f)

    def __call__(self, s, z: Tensor) -> Tensor:
        out = self.f(self.t0s + float(s) * self.spans, z)
        if not isinstance(out, Tensor):
            out = Tensor(_as_array(out, z.shape))
        return scale_rows(out, self.spans)


def integrate_batch(f: DynamicsFn, z0s: Tensor, t0s, t1s, cfg: SolverConfig | None = None) -> Tensor:
    z0s = z0s if isinstance(z0s, Tensor) else Tensor(z0s)
    if z0s.ndim != 2:
        raise ValueError("integrate_batch expects a [batch, dim] state")
    g = RescaledDynamics(f, t0s, t1s)
    if g.spans.shape[0] != z0s.shape[0]:
        raise ValueError("one horizon per batch row is required")
    if not np.any(g.spans > 0):
        return Tensor(z0s.data.copy())
    return integrate(g, z0s, 0.0, 1.0, cfg).final


# ---------------------------------------------------------------- gradients


def _vjp(f: DynamicsFn, params: list[Tensor], t, z: np.ndarray, a: np.ndarray):
    z_leaf = Tensor(z, requires_grad=True)
    out = f(t, z_leaf)
    if not isinstance(out, Tensor):
        return np.asarray(_as_array(out, z.shape)), np.zeros_like(z), [np.zeros(p.shape) for p in params]
    grads = grad(out, [z_leaf, *params], a)
    return out.data, grads[0], grads[1:]


def integrate_adjoint_backward(f: DynamicsFn, solution: OdeSolution, loss_grad_at_t1,
                               cfg: SolverConfig | None = None) -> tuple[Tensor, list[np.ndarray]]:
    """Gradients of a loss on the final state with respect to ``z0`` and ``f``'s parameters.

    Integrates ``[z, a, g]`` backwards from ``t1`` to ``t0`` where ``a`` is the
    adjoint ``dL/dz(t)`` and ``g`` collects ``dL/dtheta``.
    """
    cfg = cfg or SolverConfig()
    t0, t1 = float(solution.times[0]), float(solution.times[-1])
    z1 = solution.final.data
    shape = z1.shape
    n = z1.size
    a1 = np.asarray(loss_grad_at_t1.data if isinstance(loss_grad_at_t1, Tensor) else loss_grad_at_t1,
                    dtype=np.float64).reshape(-1)
    if a1.size != n:
        raise ValueError(f"loss gradient has {a1.size} entries for a state of {n}")
    params = [p for p in _parameters(f)]
    sizes = [p.data.size for p in params]
    total = 2 * n + sum(sizes)
    if t1 == t0:
        return Tensor(a1.reshape(shape).copy()), [np.zeros(p.shape) for p in params]

    def aug_rhs(tau, y):
        t = t1 - tau
        z = y[:n].reshape(shape)
        a = y[n : 2 * n].reshape(shape)
        fz, az, ap = _vjp(f, params, t, z, a)
        out = np.empty(total)
        out[:n] = -fz.reshape(-1)
        out[n : 2 * n] = az.reshape(-1)
        off = 2 * n
        for g, sz in zip(ap, sizes):
            out[off : off + sz] = g.reshape(-1)
            off += sz
        return out

    y0 = np.zeros(total)
    y0[:n] = z1.reshape(-1)
    y0[n : 2 * n] = a1
    span = t1 - t0
    ys, _, _ = _solve(aug_rhs, y0, 0.0, span, cfg, [span])
    y = ys[-1]
    grad_z0 = Tensor(y[n : 2 * n].reshape(shape).copy())
    grads, off = [], 2 * n
    for p, sz in zip(params, sizes):
        grads.append(y[off : off + sz].reshape(p.shape).copy())
        off += sz
    return grad_z0, grads


def _replay(f: DynamicsFn, z0: Tensor, steps: list[tuple[float, float]]) -> Tensor:
    """Re-run accepted steps with autodiff ops (discretise-then-differentiate)."""
    z = z0
    for t, h in steps:
        ks: list[Tensor] = [f(t, z)]
        for i in range(1, 7):
            acc = z
            for j, c in enumerate(_A[i - 1]):
                if c != 0.0:
                    acc = acc + ks[j] * (h * c)
            if i == 6:
                z_next = acc
                break
            ks.append(f(t + _C[i] * h, acc))
        z = z_next
    return z


def odeint(f: DynamicsFn, z0: Tensor, t0s, t1s, cfg: SolverConfig | None = None,
           grad_mode: str = "adjoint", stats: dict | None = None) -> Tensor:
    """Differentiable solve over per-row horizons; returns the end states.

    ``z0`` is [d] with scalar times or [b, d] with one horizon per row.
    """
    cfg = cfg or SolverConfig()
    single = z0.ndim == 1
    z0b = z0.reshape(1, -1) if single else z0
    t0a = np.broadcast_to(np.asarray(t0s, dtype=np.float64), (z0b.shape[0],))
    t1a = np.broadcast_to(np.asarray(t1s, dtype=np.float64), (z0b.shape[0],))
    g = RescaledDynamics(f, t0a, t1a)
    if not np.any(g.spans > 0):
        return z0
    if grad_mode == "direct":
        sol = integrate(g, z0b.data, 0.0, 1.0, cfg)
        out = _replay(g, z0b, sol.steps)
    elif grad_mode == "adjoint":
        sol = integrate(g, z0b.data, 0.0, 1.0, cfg)
        params = g.parameters()

        def bw(gout):
            gz0, gp = integrate_adjoint_backward(g, sol, gout, cfg)
            return (gz0.data, *gp)

        out = custom_op(sol.final.data, (z0b, *params), bw, "odeint")
    else:
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    if stats is not None:
        for k, v in sol.stats().items():
            stats[k] = stats.get(k, 0) + v
    return out.reshape(-1) if single else out
