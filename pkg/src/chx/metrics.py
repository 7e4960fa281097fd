"""
Figures of merit for estimated and extrapolated channels.

Column functions take one M-vector per argument; the ``*_columns`` variants
take M x F matrices and score every column at once. Decibel values of an
exact match (or of a vanishing gain) are returned as ``-inf``, never NaN.

Precoders follow the transmit convention ``r_n = h_n^T g``: maximum ratio
uses ``conj(h)``, zero forcing uses ``conj(H) (H^T conj(H))^{-1}``. Each
precoding vector is normalized to unit power on its own.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import DimensionMismatch, GridMismatch, SingularGram, ZeroVector

__all__ = [
    "Scheme", "MultiUserChannel", "PrecoderSet", "LinkBudget",
    "mse_db", "beamforming_gains", "beamforming_efficiency_db",
    "mse_db_columns", "beamforming_gains_columns", "beamforming_efficiency_db_columns",
    "precode", "precode_matrix", "sinr", "spectral_efficiency", "to_db",
    "METRIC_COLUMNS", "format_float", "metric_rows_to_csv", "write_metric_csv",
]

METRIC_COLUMNS = ("f_Hz", "ue_id", "mse_db", "be_db", "bg_meas", "bg_est", "bg_uni",
                  "sinr_db_mr", "se_mr", "sinr_db_zf", "se_zf")


class Scheme(str, enum.Enum):
    MR = "MR"
    ZF = "ZF"


def to_db(x):
    """``10 log10(x)`` with ``-inf`` for zero and no warnings."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(x)
    return float(out) if out.ndim == 0 else out


def _pair(h_true, h_est):
    h = np.asarray(h_true, dtype=np.complex128)
    g = np.asarray(h_est, dtype=np.complex128)
    if h.shape != g.shape:
        raise DimensionMismatch(f"shapes differ: {h.shape} vs {g.shape}")
    return h, g


# -- column metrics ---------------------------------------------------------

def mse_db(h_true_col, h_est_col) -> float:
    """``10 log10(||h - h_est||^2 / M)``."""
    h, g = _pair(h_true_col, h_est_col)
    d = (h - g).reshape(-1)
    return to_db(np.vdot(d, d).real / d.size)


def beamforming_gains(h_true_col, h_est_col) -> tuple[float, float, float]:
    """Gains of beamforming with the measured, estimated and uniform weights.

    Returns
    -------
    bg_meas, bg_est, bg_uni : float
        ``||h||^2``, ``|h_est^H h|^2 / ||h_est||^2`` and ``||h||^2 / M``.

    Raises
    ------
    ZeroEstimate
        If `h_est_col` is identically zero.
    """
    h, g = _pair(h_true_col, h_est_col)
    h = h.reshape(-1)
    g = g.reshape(-1)
    gg = np.vdot(g, g).real
    if not gg > 0:
        raise ZeroVector("estimated channel is zero")
    meas = float(np.vdot(h, h).real)
    est = float(abs(np.vdot(g, h)) ** 2 / gg)
    return meas, est, meas / h.size


def beamforming_efficiency_db(h_true_col, h_est_col) -> float:
    """Normalized beamforming gain in dB, in ``[-inf, 0]``.

    The linear ratio is clipped at 1 so that rounding never reports a gain
    above the Cauchy-Schwarz bound.
    """
    h, g = _pair(h_true_col, h_est_col)
    h = h.reshape(-1)
    g = g.reshape(-1)
    hh = np.vdot(h, h).real
    gg = np.vdot(g, g).real
    if not (hh > 0 and gg > 0):
        raise ZeroVector("beamforming efficiency needs two nonzero vectors")
    return to_db(min(abs(np.vdot(g, h)) ** 2 / (gg * hh), 1.0))


def _columns(h_true, h_est):
    h, g = _pair(h_true, h_est)
    if h.ndim != 2:
        raise DimensionMismatch(f"expected M x F matrices, got shape {h.shape}")
    return h, g


def mse_db_columns(h_true, h_est) -> np.ndarray:
    h, g = _columns(h_true, h_est)
    d = h - g
    return to_db(np.sum(d.real ** 2 + d.imag ** 2, axis=0) / h.shape[0])


def beamforming_gains_columns(h_true, h_est):
    """Column-wise `beamforming_gains`; returns three length-F arrays."""
    h, g = _columns(h_true, h_est)
    gg = np.sum(np.abs(g) ** 2, axis=0)
    if np.any(gg <= 0):
        raise ZeroVector(f"estimated channel is zero at column {int(np.argmin(gg))}")
    meas = np.sum(np.abs(h) ** 2, axis=0)
    est = np.abs(np.sum(np.conj(g) * h, axis=0)) ** 2 / gg
    return meas, est, meas / h.shape[0]


def beamforming_efficiency_db_columns(h_true, h_est) -> np.ndarray:
    h, g = _columns(h_true, h_est)
    hh = np.sum(np.abs(h) ** 2, axis=0)
    gg = np.sum(np.abs(g) ** 2, axis=0)
    if np.any(hh <= 0) or np.any(gg <= 0):
        raise ZeroVector("beamforming efficiency needs nonzero columns")
    ratio = np.abs(np.sum(np.conj(g) * h, axis=0)) ** 2 / (gg * hh)
    return to_db(np.minimum(ratio, 1.0))


# -- multiuser precoding ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultiUserChannel:
    """N single-user channels on one grid; ``at(k)`` stacks their columns."""

    per_ue: tuple

    def __post_init__(self):
        per_ue = tuple(self.per_ue)
        if not per_ue:
            raise DimensionMismatch("a multiuser channel needs at least one UE")
        first = per_ue[0]
        for h in per_ue[1:]:
            if h.M != first.M:
                raise DimensionMismatch("UE channels have different antenna counts")
            if h.grid != first.grid:
                raise GridMismatch("UE channels are on different grids")
        object.__setattr__(self, "per_ue", per_ue)

    @property
    def N(self) -> int:
        return len(self.per_ue)

    @property
    def M(self) -> int:
        return self.per_ue[0].M

    @property
    def grid(self):
        return self.per_ue[0].grid

    def at(self, k: int) -> np.ndarray:
        """M x N matrix of every UE's channel at frequency index `k`."""
        return np.stack([h.data[:, k] for h in self.per_ue], axis=1)


@dataclass(frozen=True, eq=False)
class PrecoderSet:
    """Unit-norm precoding vectors, one column per UE."""

    vectors: np.ndarray
    scheme: Scheme

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.complex128, copy=True)
        if v.ndim != 2:
            raise DimensionMismatch(f"precoders must be M x N, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("precoding vectors must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def N(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class LinkBudget:
    """Transmit SNR ``sigma_s^2 / sigma_w^2`` in dB, common to all UEs."""

    tx_snr_db: float

    def __post_init__(self):
        if not math.isfinite(self.tx_snr_db):
            raise ValueError(f"tx_snr_db must be finite, got {self.tx_snr_db}")
        object.__setattr__(self, "tx_snr_db", float(self.tx_snr_db))

    @property
    def rho(self) -> float:
        return 10.0 ** (self.tx_snr_db / 10.0)


def precode_matrix(h_est: np.ndarray, scheme, cond_cap: float = 1e12) -> np.ndarray:
    """Unit-norm MR or ZF precoders for an M x N estimated channel matrix.

    A stack of shape (..., M, N) is processed matrix by matrix.

    Raises
    ------
    SingularGram
        ZF only, if an N x N Gram matrix has condition number above `cond_cap`.
    ZeroVector
        If a UE channel (MR) or a ZF direction is zero.
    """
    h = np.asarray(h_est, dtype=np.complex128)
    if h.ndim < 2:
        raise DimensionMismatch(f"expected an M x N matrix, got shape {h.shape}")
    scheme = Scheme(scheme)
    if scheme is Scheme.MR:
        g = np.conj(h)
    else:
        gram = np.swapaxes(h, -1, -2) @ np.conj(h)
        cond = np.linalg.cond(gram)
        worst = np.max(cond) if np.all(np.isfinite(cond)) else np.inf
        if not worst <= cond_cap:
            raise SingularGram(
                f"Gram matrix condition number {worst:.3g} exceeds {cond_cap:.3g}")
        g = np.conj(h) @ np.linalg.inv(gram)
    norms = np.linalg.norm(g, axis=-2, keepdims=True)
    if np.any(norms <= 0):
        raise ZeroVector("cannot normalize a zero precoding vector")
    return g / norms


def precode(channel, scheme, k: int | None = None, cond_cap: float = 1e12) -> PrecoderSet:
    """Precoders from a `MultiUserChannel` at index `k`, or from an M x N array."""
    h = channel.at(k) if isinstance(channel, MultiUserChannel) else channel
    return PrecoderSet(precode_matrix(h, scheme, cond_cap), Scheme(scheme))


def sinr(h_true, prec, lb: LinkBudget) -> np.ndarray:
    """Per-UE SINR of precoders `prec` over the true channel `h_true`.

    Parameters
    ----------
    h_true : (M, N) or (..., M, N) array
        True channels; an M-vector is read as a single UE.
    prec : PrecoderSet or array shaped like `h_true`
    lb : LinkBudget

    Returns
    -------
    (N,) or (..., N) array
    """
    h = np.asarray(h_true, dtype=np.complex128)
    g = prec.vectors if isinstance(prec, PrecoderSet) else np.asarray(prec, np.complex128)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape != g.shape:
        raise DimensionMismatch(f"channel {h.shape} and precoders {g.shape} disagree")
    p = np.abs(np.swapaxes(h, -1, -2) @ g) ** 2
    n = p.shape[-1]
    signal = np.diagonal(p, axis1=-2, axis2=-1)
    # off-diagonal sum taken directly; subtracting the diagonal would cancel
    interference = np.where(np.eye(n, dtype=bool), 0.0, p).sum(axis=-1)
    rho = lb.rho
    return signal * rho / (interference * rho + 1.0)


def spectral_efficiency(sinr_linear):
    """``log2(1 + sinr)`` in bits/s/Hz."""
    s = np.asarray(sinr_linear, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("SINR must be non-negative")
    out = np.log1p(s) / math.log(2.0)
    return float(out) if out.ndim == 0 else out


# -- CSV --------------------------------------------------------------------

def format_float(x) -> str:
    """Shortest round-trip decimal; ``-inf``/``inf``/``nan`` for specials."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def metric_rows_to_csv(rows: Sequence[dict]) -> str:
    """Render metric rows (dicts keyed by `METRIC_COLUMNS`) as CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([row["ue_id"] if c == "ue_id" else format_float(row[c])
                    for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_metric_csv(path, rows: Sequence[dict]) -> None:
    atomic_write_text(path, metric_rows_to_csv(rows))
