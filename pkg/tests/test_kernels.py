from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from lsslnode import _kernels

pytestmark = pytest.mark.skipif(not _kernels.numba_kernels, reason="numba path disabled")


def test_rk_combine_parity():
    rng = np.random.default_rng(0)
    y, ks = rng.normal(size=50), rng.normal(size=(7, 50))
    for s in range(1, 7):
        c = rng.normal(size=s)
        np.testing.assert_allclose(_kernels.numba_kernels["rk_combine"](y, 0.3, ks, c),
                                   _kernels.numpy_kernels["rk_combine"](y, 0.3, ks, c), rtol=1e-13, atol=1e-14)


def test_error_norm_parity():
    rng = np.random.default_rng(1)
    err, y0, y1 = rng.normal(size=(3, 64))
    a = _kernels.numba_kernels["error_norm"](err, y0, y1, 1e-4, 1e-3)
    b = _kernels.numpy_kernels["error_norm"](err, y0, y1, 1e-4, 1e-3)
    assert a == pytest.approx(b, rel=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_mann_whitney_parity_with_ties(seed):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 10, size=40).astype(float)
    neg = rng.integers(0, 10, size=70).astype(float)
    assert _kernels.numba_kernels["mann_whitney_u"](pos, neg) == _kernels.numpy_kernels["mann_whitney_u"](pos, neg)


def test_env_flag_selects_numpy_fallback():
    code = "from lsslnode import _kernels as k; print(k.USE_NUMBA, k.rk_combine is k.numpy_kernels['rk_combine'])"
    env = dict(os.environ, LSSLNODE_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
