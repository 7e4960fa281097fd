import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chx import _kernels

from conftest import crandn

needs_numba = pytest.mark.skipif("numba" not in _kernels.available_backends(),
                                 reason="numba not installed")


def naive(c, df, taus):
    return np.array([sum(c[k] * np.exp(2j * np.pi * k * df * t) for k in range(len(c)))
                     for t in taus])


@pytest.mark.parametrize("n,count", [(1, 3), (7, 50), (281, 1000)])
def test_numpy_matches_naive(rng, n, count):
    c = crandn(rng, n)
    taus = rng.uniform(0, 8e-6, count)
    np.testing.assert_allclose(_kernels.trig_poly_numpy(c, 125e3, taus),
                               naive(c, 125e3, taus), rtol=1e-9, atol=1e-9 * np.abs(c).sum())


@needs_numba
@given(st.integers(1, 300), st.integers(0, 700), st.integers(0, 2**32 - 1))
def test_backends_agree(n, count, seed):
    rng = np.random.default_rng(seed)
    c = crandn(rng, n)
    taus = np.sort(rng.uniform(0, 8e-6, count))
    a = _kernels.trig_poly_numpy(c, 125e3, taus)
    b = _kernels.trig_poly_numba(c, 125e3, taus)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10 * max(1.0, np.abs(c).sum()))


@needs_numba
def test_numba_is_schedule_independent(rng):
    c = crandn(rng, 281)
    taus = rng.uniform(0, 8e-6, 4096)
    first = _kernels.trig_poly_numba(c, 125e3, taus)
    for n in (1, 2):
        _kernels.numba.set_num_threads(min(n, _kernels.numba.config.NUMBA_NUM_THREADS))
        assert np.array_equal(_kernels.trig_poly_numba(c, 125e3, taus), first)
    _kernels.numba.set_num_threads(_kernels.numba.config.NUMBA_NUM_THREADS)


def test_empty_inputs():
    assert _kernels.trig_poly_numpy(np.ones(3), 1.0, np.zeros(0)).shape == (0,)
    if _kernels.trig_poly_numba is not None:
        assert _kernels.trig_poly_numba(np.ones(3), 1.0, np.zeros(0)).shape == (0,)
        np.testing.assert_array_equal(_kernels.trig_poly_numba(np.zeros(0), 1.0, np.ones(2)), 0)


def _backend_in_subprocess(value):
    env = dict(os.environ, CHX_BACKEND=value)
    return subprocess.run([sys.executable, "-c", "from chx import _kernels; print(_kernels.BACKEND)"],
                          env=env, capture_output=True, text=True)


def test_env_flag_selects_numpy():
    out = _backend_in_subprocess("numpy")
    assert out.returncode == 0 and out.stdout.strip() == "numpy"


@needs_numba
def test_env_flag_selects_numba():
    out = _backend_in_subprocess("NUMBA")
    assert out.stdout.strip() == "numba"


def test_env_flag_rejects_unknown():
    out = _backend_in_subprocess("cuda")
    assert out.returncode != 0 and "CHX_BACKEND" in out.stderr
