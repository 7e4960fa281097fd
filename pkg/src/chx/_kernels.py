"""
Hot inner loops of the delay searches.

Every delay scan reduces to evaluating a trigonometric polynomial

    P(tau) = sum_k c[k] * exp(+j 2 pi k df tau)

on a grid of delays. Two implementations are provided: a numba kernel using
Horner's rule on blocks of candidates (one block per parallel iteration), and a pure numpy
fallback built on a cached phase matrix. The backend is chosen at import
time from ``CHX_BACKEND`` (``numba`` or ``numpy``); numba is used when it
is importable and ``CHX_BACKEND`` is unset.

Each candidate is reduced independently, so results do not depend on the
parallel schedule.
"""

from __future__ import annotations

import functools
import os
import warnings

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
else:
    # callers may run kernels from several Python threads at once
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "threadsafe"
        # an outdated TBB is skipped in favour of OpenMP; the warning is noise
        warnings.filterwarnings("ignore", message="The TBB threading layer requires",
                                category=numba.NumbaWarning)

__all__ = ["BACKEND", "trig_poly", "trig_poly_numpy", "trig_poly_numba",
           "available_backends", "set_threads"]

_CHUNK = 512


def trig_poly_numpy(c: np.ndarray, df: float, taus: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_k c[k] exp(j 2 pi k df tau)`` for every tau in `taus`."""
    c = np.ascontiguousarray(c, dtype=np.complex128)
    taus = np.ascontiguousarray(taus, dtype=np.float64)
    out = np.empty(taus.size, dtype=np.complex128)
    for lo in range(0, taus.size, _CHUNK):
        block = taus[lo:lo + _CHUNK]
        out[lo:lo + block.size] = _phase_matrix(block.tobytes(), float(df), c.size) @ c
    return out


@functools.lru_cache(maxsize=32)
def _phase_matrix(tau_bytes: bytes, df: float, n: int) -> np.ndarray:
    taus = np.frombuffer(tau_bytes, dtype=np.float64)
    mat = np.exp(2j * np.pi * df * np.outer(taus, np.arange(n)))
    mat.setflags(write=False)
    return mat


if numba is not None:
    _BLOCK = 64

    @numba.njit(parallel=True, cache=True, nogil=True, fastmath=False)
    def _trig_poly_nb(c, df, taus):
        n = c.size
        t = taus.size
        out = np.empty(t, dtype=np.complex128)
        n_blocks = (t + _BLOCK - 1) // _BLOCK
        for b in numba.prange(n_blocks):
            lo = b * _BLOCK
            hi = min(lo + _BLOCK, t)
            # Horner's rule for a block of candidates at once; the inner loop
            # runs over independent candidates, so it has no dependency chain
            m = hi - lo
            w = np.exp(2j * np.pi * df * taus[lo:hi])
            wr = w.real.copy()
            wi = w.imag.copy()
            ar = np.full(m, c[n - 1].real)
            ai = np.full(m, c[n - 1].imag)
            for k in range(n - 2, -1, -1):
                cr = c[k].real
                ci = c[k].imag
                for j in range(m):
                    r = ar[j] * wr[j] - ai[j] * wi[j] + cr
                    ai[j] = ar[j] * wi[j] + ai[j] * wr[j] + ci
                    ar[j] = r
            for j in range(m):
                out[lo + j] = complex(ar[j], ai[j])
        return out

    def trig_poly_numba(c: np.ndarray, df: float, taus: np.ndarray) -> np.ndarray:
        c = np.ascontiguousarray(c, dtype=np.complex128)
        taus = np.ascontiguousarray(taus, dtype=np.float64)
        if c.size == 0:
            return np.zeros(taus.size, dtype=np.complex128)
        return _trig_poly_nb(c, float(df), taus)
else:  # pragma: no cover
    trig_poly_numba = None


def available_backends() -> list[str]:
    return ["numpy"] + (["numba"] if trig_poly_numba is not None else [])


def _select_backend() -> str:
    wanted = os.environ.get("CHX_BACKEND", "").strip().lower()
    if wanted in ("", "numba"):
        return "numba" if trig_poly_numba is not None else "numpy"
    if wanted == "numpy":
        return "numpy"
    raise ValueError(f"CHX_BACKEND must be 'numba' or 'numpy', got {wanted!r}")


BACKEND = _select_backend()
trig_poly = trig_poly_numba if BACKEND == "numba" else trig_poly_numpy


def set_threads(n: int) -> None:
    """Cap the numba worker pool at `n` threads (no-op for the numpy backend)."""
    if numba is not None and BACKEND == "numba":
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
