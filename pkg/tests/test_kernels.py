import importlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbal import _fallback, kernels

try:
    from rbal import _kernels
except ImportError:  # extension not built
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled extension not built")


def _inputs(seed, P, dim, n):
    rng = np.random.default_rng(seed)
    Zh = rng.normal(size=(P, dim)) + 1j * rng.normal(size=(P, dim))
    dZh = rng.normal(size=(P, n, dim)) + 1j * rng.normal(size=(P, n, dim))
    return Zh, dZh, rng.uniform(0.1, 1.0, P)


def test_backend_selected():
    assert kernels.BACKEND == ("cython" if _kernels is not None else "numpy")


def test_pure_python_switch():
    code = "import rbal; print(rbal.BACKEND)"
    env = {"RBAL_PURE_PYTHON": "1", "PATH": ""}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "numpy"


@needs_ext
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 9), st.sampled_from([1, 2, 3]))
def test_fs_pointwise_parity(seed, P, dim, n):
    Zh, dZh, _ = _inputs(seed, P, dim, n)
    a, b = _kernels.fs_pointwise(Zh, dZh), _fallback.fs_pointwise(Zh, dZh)
    # g is a difference of terms of size |dZ|^2 / |Z|^2; with dim 1 it cancels to rounding
    q = np.sum(np.abs(Zh) ** 2, axis=1)
    g_scale = np.max(np.sum(np.abs(dZh) ** 2, axis=2) / q[:, None])
    np.testing.assert_allclose(a[0], b[0], rtol=1e-13)
    np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-12 * g_scale)
    np.testing.assert_allclose(a[2], b[2], rtol=0, atol=1e-12 * g_scale**n)


@needs_ext
@given(st.integers(0, 2**31), st.integers(1, 60), st.integers(1, 12))
def test_moment_sum_parity(seed, P, dim):
    Zh, _, c = _inputs(seed, P, dim, 1)
    a, b = _kernels.moment_sum(Zh, c), _fallback.moment_sum(Zh, c)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13 * np.max(np.abs(b)))
    np.testing.assert_array_equal(a, a.conj().T)


def test_fallback_closed_form():
    # a single line through (1, w) has Fubini-Study metric 1 / (1 + |w|^2)^2
    w = np.array([0.0, 0.5 + 0.5j, 2.0])
    Zh = np.stack([np.ones(3), w], axis=1)
    dZh = np.zeros((3, 1, 2), complex)
    dZh[:, 0, 1] = 1.0
    q, g, detg = _fallback.fs_pointwise(Zh, dZh)
    np.testing.assert_allclose(q, 1 + np.abs(w) ** 2)
    np.testing.assert_allclose(detg, 1 / (1 + np.abs(w) ** 2) ** 2)


def test_dispatch_casts_inputs():
    Zh, dZh, c = _inputs(0, 5, 3, 1)
    q, g, detg = kernels.fs_pointwise(Zh[:, ::-1].copy().T.T, dZh)
    assert q.shape == (5,) and g.shape == (5, 1, 1)
    M = kernels.moment_sum(Zh, c.astype(np.float32))
    np.testing.assert_allclose(M, _fallback.moment_sum(Zh, c), rtol=1e-6)
