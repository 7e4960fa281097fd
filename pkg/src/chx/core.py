"""
Core channel containers and the preprocessing chain.

A measured channel goes through three stages::

    Raw --compensate_rf--> Compensated --normalize--> Normalized

after which a training band is sliced out of the normalized matrix. The
normalization constant is always taken over the full measured band, and a
slice keeps the scale of its parent.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .errors import (BandOutOfRange, DivisionGuard, FormatError, GridInvalid,
                     GridMismatch, ZeroMatrix)

__all__ = [
    "Stage", "FrequencyGrid", "ChannelMatrix", "RfResponse", "TrainingBand",
    "compensate_rf", "normalize", "select_training_band", "band_from_center",
    "write_chx", "read_chx", "CHX_MAGIC",
]

CHX_MAGIC = b"CHX1\0\0\0\0"
_CHX_HEADER = struct.Struct("<8sIIddB")


class Stage(enum.IntEnum):
    RAW = 0
    COMPENSATED = 1
    NORMALIZED = 2


@dataclass(frozen=True)
class FrequencyGrid:
    """Uniform frequency axis ``f_start + k * spacing`` for ``0 <= k < count``.

    Frequencies are always computed from the closed form, never by
    accumulating the spacing.
    """

    f_start: float
    spacing: float
    count: int

    def __post_init__(self):
        if not (np.isfinite(self.f_start) and np.isfinite(self.spacing)):
            raise GridInvalid("grid start and spacing must be finite")
        if self.spacing <= 0:
            raise GridInvalid(f"spacing must be positive, got {self.spacing}")
        if int(self.count) != self.count or self.count < 1:
            raise GridInvalid(f"count must be a positive integer, got {self.count}")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "f_start", float(self.f_start))
        object.__setattr__(self, "spacing", float(self.spacing))

    def frequency(self, k):
        return self.f_start + k * self.spacing

    @property
    def frequencies(self) -> np.ndarray:
        return self.f_start + np.arange(self.count) * self.spacing

    @property
    def f_stop(self) -> float:
        return self.frequency(self.count - 1)

    @property
    def bandwidth(self) -> float:
        return (self.count - 1) * self.spacing

    def index_of(self, f: float, tol: float = 1e-6) -> int:
        """Index of the node at frequency `f` (within `tol` spacings)."""
        t = (f - self.f_start) / self.spacing
        k = int(round(t))
        if abs(t - k) > tol or not 0 <= k < self.count:
            raise GridInvalid(f"{f} Hz is not a node of {self}")
        return k

    def sub(self, start: int, count: int) -> "FrequencyGrid":
        """Grid of `count` nodes starting at 0-based node `start`."""
        return FrequencyGrid(self.frequency(start), self.spacing, count)


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """M x K complex transfer-function samples bound to a frequency grid."""

    data: np.ndarray
    grid: FrequencyGrid
    stage: Stage = Stage.COMPENSATED

    def __post_init__(self):
        data = np.array(self.data, dtype=np.complex128, copy=True)
        if data.ndim != 2:
            raise GridMismatch(f"channel data must be 2-D, got shape {data.shape}")
        if data.shape[1] != self.grid.count:
            raise GridMismatch(
                f"{data.shape[1]} columns do not match grid count {self.grid.count}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def K(self) -> int:
        return self.data.shape[1]

    def column(self, k: int) -> np.ndarray:
        return self.data[:, k]


@dataclass(frozen=True, eq=False)
class RfResponse:
    """Back-to-back calibration response of the sounder, one value per frequency."""

    values: np.ndarray
    grid: FrequencyGrid
    floor: float = 1e-12

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128, copy=True).reshape(-1)
        if values.size != self.grid.count:
            raise GridMismatch(f"{values.size} rf values for {self.grid.count} frequencies")
        bad = np.flatnonzero(np.abs(values) < self.floor)
        if bad.size:
            raise DivisionGuard(
                f"rf response below floor {self.floor:g} at index {int(bad[0])}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TrainingBand:
    """Contiguous training band; `offset` is 1-based."""

    offset: int
    width: int

    def __post_init__(self):
        if self.offset < 1:
            raise BandOutOfRange(f"offset must be >= 1, got {self.offset}")
        if self.width < 2:
            raise BandOutOfRange(f"band width must be >= 2, got {self.width}")

    @property
    def start(self) -> int:
        """0-based index of the first column."""
        return self.offset - 1

    @property
    def stop(self) -> int:
        """0-based index one past the last column."""
        return self.offset - 1 + self.width

    def validate(self, grid: FrequencyGrid) -> None:
        if self.offset + self.width - 1 > grid.count:
            raise BandOutOfRange(
                f"band [{self.offset}, {self.offset + self.width - 1}] exceeds K={grid.count}")

    def grid(self, parent: FrequencyGrid) -> FrequencyGrid:
        self.validate(parent)
        return parent.sub(self.start, self.width)


def band_from_center(grid: FrequencyGrid, center_hz: float, width_hz: float) -> TrainingBand:
    """Training band of ``width_hz / spacing + 1`` nodes centred on `center_hz`."""
    width = int(round(width_hz / grid.spacing)) + 1
    start0 = int(round((center_hz - grid.f_start) / grid.spacing - (width - 1) / 2))
    band = TrainingBand(start0 + 1, width)
    band.validate(grid)
    return band


def compensate_rf(h_meas: ChannelMatrix, rf: RfResponse) -> ChannelMatrix:
    """Divide every column of a raw measurement by the RF chain response."""
    if h_meas.grid != rf.grid:
        raise GridMismatch("channel and rf response are on different grids")
    bad = np.flatnonzero(np.abs(rf.values) < rf.floor)
    if bad.size:
        raise DivisionGuard(f"rf response below floor at index {int(bad[0])}")
    return ChannelMatrix(h_meas.data / rf.values[None, :], h_meas.grid, Stage.COMPENSATED)


def normalize(h: ChannelMatrix) -> tuple[ChannelMatrix, float]:
    """Scale `h` to unit average power per sample.

    Returns
    -------
    normalized : ChannelMatrix
        ``h / mu``, with squared Frobenius norm ``M * K``.
    mu : float
        ``sqrt(||h||_F^2 / (M K))``.
    """
    energy = float(np.vdot(h.data, h.data).real)
    if not energy > 0:
        raise ZeroMatrix("cannot normalize an all-zero channel")
    mu = float(np.sqrt(energy / (h.M * h.K)))
    return ChannelMatrix(h.data / mu, h.grid, Stage.NORMALIZED), mu


def select_training_band(h: ChannelMatrix, band: TrainingBand) -> ChannelMatrix:
    """Columns ``a .. a + K_u - 1`` of `h` (no re-normalization)."""
    sub = band.grid(h.grid)
    return ChannelMatrix(h.data[:, band.start:band.stop], sub, h.stage)


# -- CHX1 container ---------------------------------------------------------

def write_chx(path, h: ChannelMatrix) -> None:
    """Write `h` as a CHX1 container (atomically, via a temporary file)."""
    path = Path(path)
    header = _CHX_HEADER.pack(CHX_MAGIC, h.M, h.K, h.grid.f_start, h.grid.spacing,
                              int(h.stage))
    payload = np.ascontiguousarray(h.data, dtype="<c16").tobytes(order="C")
    atomic_write_bytes(path, header + payload)


def read_chx(path) -> ChannelMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _CHX_HEADER.size:
        raise FormatError(f"{path}: truncated CHX1 header")
    magic, m, k, f_start, spacing, stage = _CHX_HEADER.unpack_from(raw)
    if magic != CHX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _CHX_HEADER.size + 16 * m * k
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    try:
        stage = Stage(stage)
    except ValueError:
        raise FormatError(f"{path}: unknown stage tag {stage}") from None
    data = np.frombuffer(raw, dtype="<c16", offset=_CHX_HEADER.size).reshape(m, k)
    return ChannelMatrix(data.astype(np.complex128), FrequencyGrid(f_start, spacing, k), stage)
