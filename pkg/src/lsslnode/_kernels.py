"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``LSSLNODE_NUMBA=0`` to force the numpy versions (numba is also skipped
when it is not importable). Both paths compute the same quantities; the
numpy versions are the reference in ``tests/test_kernels.py``.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["USE_NUMBA", "rk_combine", "error_norm", "mann_whitney_u", "numpy_kernels", "numba_kernels"]


def _numba_requested() -> bool:
    return os.environ.get("LSSLNODE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------- numpy


def _rk_combine_np(y: np.ndarray, h: float, ks: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """``y + h * sum_j coeffs[j] * ks[j]`` over the first ``len(coeffs)`` stages."""
    return y + h * (coeffs @ ks[: coeffs.shape[0]])


def _error_norm_np(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    r = err / scale
    return float(np.sqrt(np.mean(r * r)))


def _mann_whitney_u_np(pos: np.ndarray, neg: np.ndarray) -> float:
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    return float(below.sum() + 0.5 * (upto - below).sum())


numpy_kernels = {
    "rk_combine": _rk_combine_np,
    "error_norm": _error_norm_np,
    "mann_whitney_u": _mann_whitney_u_np,
}

# ---------------------------------------------------------------- numba

numba_kernels: dict = {}

if _numba_requested():
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba = None

    if numba is not None:

        @numba.njit(cache=True)
        def _rk_combine_nb(y, h, ks, coeffs):
            n = y.shape[0]
            acc = np.zeros(n)
            for j in range(coeffs.shape[0]):
                c = coeffs[j]
                for i in range(n):
                    acc[i] += c * ks[j, i]
            out = np.empty(n)
            for i in range(n):
                out[i] = y[i] + h * acc[i]
            return out

        @numba.njit(cache=True)
        def _error_norm_nb(err, y0, y1, atol, rtol):
            n = err.shape[0]
            acc = 0.0
            for i in range(n):
                sc = atol + rtol * max(abs(y0[i]), abs(y1[i]))
                r = err[i] / sc
                acc += r * r
            return np.sqrt(acc / n)

        @numba.njit(cache=True)
        def _mann_whitney_u_nb(pos, neg):
            neg = np.sort(neg)
            m = neg.shape[0]
            below = 0.0
            ties = 0.0
            for p in pos:
                lo = np.searchsorted(neg, p, side="left")
                hi = lo
                while hi < m and neg[hi] == p:
                    hi += 1
                below += lo
                ties += hi - lo
            return below + 0.5 * ties

        def _error_norm_nb_wrap(err, y0, y1, atol, rtol):
            return float(_error_norm_nb(err, y0, y1, float(atol), float(rtol)))

        def _mann_whitney_u_nb_wrap(pos, neg):
            return float(_mann_whitney_u_nb(np.ascontiguousarray(pos, dtype=np.float64),
                                            np.ascontiguousarray(neg, dtype=np.float64)))

        def _rk_combine_nb_wrap(y, h, ks, coeffs):
            return _rk_combine_nb(y, float(h), ks, coeffs)

        numba_kernels = {
            "rk_combine": _rk_combine_nb_wrap,
            "error_norm": _error_norm_nb_wrap,
            "mann_whitney_u": _mann_whitney_u_nb_wrap,
        }

USE_NUMBA = bool(numba_kernels)
_active = numba_kernels if USE_NUMBA else numpy_kernels

rk_combine = _active["rk_combine"]
error_norm = _active["error_norm"]
mann_whitney_u = _active["mann_whitney_u"]
