"""
Synthetic array manifolds.

Directions use azimuth ``phi`` measured from the x axis in the xy plane and
elevation ``theta`` measured up from that plane. The unit vector pointing
from the array towards the source is::

    d(phi, theta) = (cos theta cos phi, cos theta sin phi, sin theta)

and a plane wave propagates along ``u = -d``, so element ``m`` at position
``p_m`` sees the phase ``exp(-j 2 pi f <u, p_m> / c)``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .core import FrequencyGrid
from .errors import FormatError, GridInvalid, OutOfHull, PoseInvalid

__all__ = [
    "SPEED_OF_LIGHT", "Element", "ISOTROPIC", "ArrayGeometry", "ArrayPattern",
    "direction", "steering_vector", "steering_response", "synth_calibration",
    "pattern_lookup", "pattern_lookup_many", "pattern_at_frequencies",
    "virtual_array_from_element", "cylinder", "ula", "ring", "single_element",
    "geometry_preset", "write_chp", "read_chp", "CHP_MAGIC",
]

SPEED_OF_LIGHT = 299_792_458.0
CHP_MAGIC = b"CHP1\0\0\0\0"
_TWO_PI = 2.0 * np.pi
_SNAP = 1e-9


@dataclass(frozen=True)
class Element:
    """Element gain model: isotropic (``exponent=None``) or ``max(0, cos)^exponent``."""

    exponent: float | None = None

    def __post_init__(self):
        if self.exponent is not None:
            if not np.isfinite(self.exponent) or self.exponent < 0:
                raise ValueError(f"cosine exponent must be finite and >= 0, got {self.exponent}")

    @property
    def isotropic(self) -> bool:
        return self.exponent is None

    @classmethod
    def cosine_power(cls, exponent: float) -> "Element":
        return cls(float(exponent))


ISOTROPIC = Element()


def direction(phi, theta) -> np.ndarray:
    """Unit vector(s) towards the source, shape ``broadcast(phi, theta) + (3,)``."""
    phi, theta = np.broadcast_arrays(np.asarray(phi, float), np.asarray(theta, float))
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Element positions (M x 3, metres) and boresights (M x 2, az/el radians)."""

    positions: np.ndarray
    orientations: np.ndarray | None = None
    element: Element = ISOTROPIC

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        if pos.shape[0] < 1:
            raise ValueError("an array needs at least one element")
        if not np.all(np.isfinite(pos)):
            raise ValueError("element positions must be finite")
        if self.orientations is None:
            ori = np.zeros((pos.shape[0], 2))
        else:
            ori = np.array(self.orientations, dtype=float).reshape(-1, 2)
        if ori.shape[0] != pos.shape[0]:
            raise ValueError(f"{ori.shape[0]} orientations for {pos.shape[0]} elements")
        if not np.all(np.isfinite(ori)):
            raise ValueError("element orientations must be finite")
        pos.setflags(write=False)
        ori.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)

    @property
    def M(self) -> int:
        return self.positions.shape[0]

    def gains(self, phi, theta) -> np.ndarray:
        """Real element gains, shape ``broadcast(phi, theta) + (M,)``."""
        d = direction(phi, theta)
        if self.element.isotropic:
            return np.ones(d.shape[:-1] + (self.M,))
        bore = direction(self.orientations[:, 0], self.orientations[:, 1])
        cosang = d @ bore.T
        return np.maximum(cosang, 0.0) ** self.element.exponent


def steering_response(geom: ArrayGeometry, phi: float, theta: float, freqs) -> np.ndarray:
    """Steering vectors for one direction at several frequencies, shape (M, len(freqs))."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if np.any(freqs <= 0):
        raise ValueError("frequencies must be positive")
    proj = geom.positions @ direction(phi, theta)           # <d, p_m>, metres
    gain = geom.gains(phi, theta)
    phase = np.exp(1j * _TWO_PI * np.outer(proj, freqs) / SPEED_OF_LIGHT)
    return gain[:, None] * phase


def steering_vector(geom: ArrayGeometry, phi: float, theta: float, f: float) -> np.ndarray:
    """Plane-wave response of every element, shape (M,)."""
    if not f > 0:
        raise ValueError(f"frequency must be positive, got {f}")
    return steering_response(geom, phi, theta, [f])[:, 0]


# -- calibration patterns ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class ArrayPattern:
    """Complex response sampled on (azimuth, elevation, element, frequency)."""

    response: np.ndarray
    az_grid: np.ndarray
    el_grid: np.ndarray
    freq_grid: FrequencyGrid

    def __post_init__(self):
        az = np.array(self.az_grid, dtype=float).reshape(-1)
        el = np.array(self.el_grid, dtype=float).reshape(-1)
        _check_angle_grids(az, el)
        resp = np.asarray(self.response, dtype=np.complex128)
        if resp.ndim != 4 or resp.shape[:2] != (az.size, el.size) \
                or resp.shape[3] != self.freq_grid.count:
            raise GridInvalid(
                f"response shape {resp.shape} inconsistent with grids "
                f"({az.size}, {el.size}, M, {self.freq_grid.count})")
        for a in (az, el):
            a.setflags(write=False)
        resp = resp.view()
        resp.setflags(write=False)
        object.__setattr__(self, "az_grid", az)
        object.__setattr__(self, "el_grid", el)
        object.__setattr__(self, "response", resp)

    @property
    def M(self) -> int:
        return self.response.shape[2]

    @property
    def shape(self) -> tuple:
        return self.response.shape

    def covers(self, f: float) -> bool:
        try:
            _freq_weights(self.freq_grid, np.atleast_1d(f))
        except OutOfHull:
            return False
        return True


def _check_angle_grids(az, el):
    if az.size < 1 or el.size < 1:
        raise GridInvalid("angle grids must be nonempty")
    if not (np.all(np.isfinite(az)) and np.all(np.isfinite(el))):
        raise GridInvalid("angle grids must be finite")
    if np.any(np.diff(az) <= 0) or np.any(np.diff(el) <= 0):
        raise GridInvalid("angle grids must be strictly ascending")
    if az[-1] - az[0] >= _TWO_PI - 1e-12:
        raise GridInvalid("azimuth grid must span less than 2 pi (no duplicate endpoint)")
    if el[0] <= -np.pi / 2 or el[-1] > np.pi / 2:
        raise GridInvalid("elevation grid must lie in (-pi/2, pi/2]")


def synth_calibration(geom: ArrayGeometry, az_grid, el_grid, freq_grid: FrequencyGrid
                      ) -> ArrayPattern:
    """Sample the plane-wave manifold of `geom` on the given grids."""
    az = np.asarray(az_grid, dtype=float).reshape(-1)
    el = np.asarray(el_grid, dtype=float).reshape(-1)
    _check_angle_grids(az, el)
    freqs = freq_grid.frequencies
    if np.any(freqs <= 0):
        raise GridInvalid("calibration frequencies must be positive")
    out = np.empty((az.size, el.size, geom.M, freqs.size), dtype=np.complex128)
    # one azimuth row at a time keeps the phase temporary small
    for i, phi in enumerate(az):
        d = direction(phi, el)                               # (N_el, 3)
        proj = d @ geom.positions.T                          # (N_el, M)
        gain = geom.gains(phi, el)                           # (N_el, M)
        phase = np.exp(1j * _TWO_PI * proj[:, :, None] * freqs[None, None, :]
                       / SPEED_OF_LIGHT)
        out[i] = gain[:, :, None] * phase
    return ArrayPattern(out, az, el, freq_grid)


def _az_weights(az, phi):
    """Lower/upper azimuth node indices and upper weight, with wrap-around."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    n = az.size
    if n == 1:
        z = np.zeros(phi.shape, dtype=np.intp)
        return z, z, np.zeros(phi.shape)
    w = az[0] + np.mod(phi - az[0], _TWO_PI)
    w = np.where(w >= az[0] + _TWO_PI, az[0], w)
    i0 = np.searchsorted(az, w, side="right") - 1
    i0 = np.clip(i0, 0, n - 1)
    wrap = i0 == n - 1
    i1 = np.where(wrap, 0, i0 + 1)
    upper = np.where(wrap, az[0] + _TWO_PI, az[np.minimum(i0 + 1, n - 1)])
    t = (w - az[i0]) / (upper - az[i0])
    return i0, i1, t


def _el_weights(el, theta, tol=1e-12):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n = el.size
    if np.any(theta < el[0] - tol) or np.any(theta > el[-1] + tol):
        raise OutOfHull(f"elevation outside calibration range [{el[0]}, {el[-1]}]")
    if n == 1:
        z = np.zeros(theta.shape, dtype=np.intp)
        return z, z, np.zeros(theta.shape)
    theta = np.clip(theta, el[0], el[-1])
    j0 = np.clip(np.searchsorted(el, theta, side="right") - 1, 0, n - 2)
    t = (theta - el[j0]) / (el[j0 + 1] - el[j0])
    return j0, j0 + 1, t


def _freq_weights(grid: FrequencyGrid, freqs):
    tf = (np.asarray(freqs, dtype=float) - grid.f_start) / grid.spacing
    near = np.round(tf)
    tf = np.where(np.abs(tf - near) <= _SNAP, near, tf)
    if np.any(tf < 0) or np.any(tf > grid.count - 1):
        raise OutOfHull(
            f"frequency outside calibration range [{grid.f_start}, {grid.f_stop}] Hz")
    if grid.count == 1:
        z = np.zeros(tf.shape, dtype=np.intp)
        return z, z, np.zeros(tf.shape)
    k0 = np.clip(np.floor(tf).astype(np.intp), 0, grid.count - 2)
    return k0, k0 + 1, tf - k0


def pattern_lookup_many(pat: ArrayPattern, phi: float, theta: float, freqs) -> np.ndarray:
    """Trilinear interpolation of `pat` at one direction, shape (M, len(freqs))."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    a0, a1, ta = (v[0] for v in _az_weights(pat.az_grid, phi))
    e0, e1, te = (v[0] for v in _el_weights(pat.el_grid, theta))
    k0, k1, tk = _freq_weights(pat.freq_grid, freqs)
    r = pat.response
    corners = ((r[a0, e0], (1 - ta) * (1 - te)), (r[a0, e1], (1 - ta) * te),
               (r[a1, e0], ta * (1 - te)), (r[a1, e1], ta * te))

    def at(k):
        acc = corners[0][1] * corners[0][0][:, k]
        for plane, w in corners[1:]:
            acc = acc + w * plane[:, k]
        return acc

    return (1 - tk) * at(k0) + tk * at(k1)


def pattern_lookup(pat: ArrayPattern, phi: float, theta: float, f: float) -> np.ndarray:
    """Interpolated response of every element, shape (M,)."""
    return pattern_lookup_many(pat, phi, theta, [f])[:, 0]


def pattern_at_frequencies(pat: ArrayPattern, freqs) -> np.ndarray:
    """Pattern on all angle nodes, interpolated along frequency.

    Returns an array of shape (N_az, N_el, M, len(freqs)) whose entries equal
    ``pattern_lookup`` at the corresponding nodes.
    """
    k0, k1, tk = _freq_weights(pat.freq_grid, np.atleast_1d(freqs))
    return (1 - tk) * pat.response[..., k0] + tk * pat.response[..., k1]


def virtual_array_from_element(element_pattern: ArrayPattern, poses) -> ArrayPattern:
    """Build an M-element pattern by moving and rotating a single measured element.

    Parameters
    ----------
    element_pattern : ArrayPattern
        Pattern with ``M == 1``, measured with the element at the origin.
    poses : sequence of (position, rotation)
        ``position`` is a 3-vector in metres, ``rotation`` an azimuth rotation
        in radians applied to the element's boresight.
    """
    if element_pattern.M != 1:
        raise PoseInvalid(f"element pattern must have M=1, got M={element_pattern.M}")
    poses = list(poses)
    if not poses:
        raise PoseInvalid("pose list is empty")
    positions, rotations = [], []
    for pose in poses:
        try:
            pos, rot = pose
            pos = np.asarray(pos, dtype=float).reshape(3)
            rot = float(rot)
        except (TypeError, ValueError):
            raise PoseInvalid(f"malformed pose {pose!r}") from None
        if not (np.all(np.isfinite(pos)) and np.isfinite(rot)):
            raise PoseInvalid(f"non-finite pose {pose!r}")
        positions.append(pos)
        rotations.append(rot)
    positions = np.array(positions)
    az, el = element_pattern.az_grid, element_pattern.el_grid
    freqs = element_pattern.freq_grid.frequencies
    resp = element_pattern.response[:, :, 0, :]              # (N_az, N_el, K)
    out = np.empty((az.size, el.size, len(poses), freqs.size), dtype=np.complex128)
    d = direction(az[:, None], el[None, :])                  # (N_az, N_el, 3)
    for m, (pos, rot) in enumerate(zip(positions, rotations)):
        i0, i1, t = _az_weights(az, az - rot)
        rotated = (1 - t)[:, None, None] * resp[i0] + t[:, None, None] * resp[i1]
        phase = np.exp(1j * _TWO_PI * (d @ pos)[:, :, None] * freqs / SPEED_OF_LIGHT)
        out[:, :, m, :] = rotated * phase
    return ArrayPattern(out, az, el, element_pattern.freq_grid)


# -- geometry presets -------------------------------------------------------

def _half_wavelength(f_design: float) -> float:
    return SPEED_OF_LIGHT / f_design / 2.0


def cylinder(columns: int = 16, rows: int = 4, f_design: float = 3.5e9,
             spacing: float | None = None, radius: float | None = None,
             exponent: float = 1.0) -> ArrayGeometry:
    """Cylindrical array of outward-facing columns (64 elements by default).

    `spacing` is both the vertical element pitch and the chord between
    neighbouring columns; it defaults to half a wavelength at `f_design`.
    """
    if spacing is None:
        spacing = _half_wavelength(f_design)
    if radius is None:
        radius = spacing / (2.0 * np.sin(np.pi / columns)) if columns > 1 else 0.0
    col_az = _TWO_PI * np.arange(columns) / columns
    z = (np.arange(rows) - (rows - 1) / 2.0) * spacing
    az_m = np.repeat(col_az, rows)
    z_m = np.tile(z, columns)
    pos = np.stack([radius * np.cos(az_m), radius * np.sin(az_m), z_m], axis=1)
    ori = np.stack([az_m, np.zeros_like(az_m)], axis=1)
    return ArrayGeometry(pos, ori, Element.cosine_power(exponent))


def ula(m: int, spacing: float | None = None, f_design: float = 3.5e9,
        axis: int = 0, element: Element = ISOTROPIC) -> ArrayGeometry:
    """Uniform linear array centred on the origin along coordinate `axis`."""
    if spacing is None:
        spacing = _half_wavelength(f_design)
    pos = np.zeros((m, 3))
    pos[:, axis] = (np.arange(m) - (m - 1) / 2.0) * spacing
    return ArrayGeometry(pos, None, element)


def ring(m: int, radius: float | None = None, f_design: float = 3.5e9,
         element: Element = ISOTROPIC) -> ArrayGeometry:
    """Uniform circular array in the xy plane; elements face outwards."""
    if radius is None:
        radius = _half_wavelength(f_design) / (2.0 * np.sin(np.pi / m)) if m > 1 else 0.0
    az_m = _TWO_PI * np.arange(m) / m
    pos = np.stack([radius * np.cos(az_m), radius * np.sin(az_m), np.zeros(m)], axis=1)
    ori = np.stack([az_m, np.zeros(m)], axis=1)
    return ArrayGeometry(pos, ori, element)


def single_element() -> ArrayGeometry:
    return ArrayGeometry(np.zeros((1, 3)))


_PRESET_RE = re.compile(r"^(cylinder|ula|ring)(\d+)$")


def geometry_preset(name: str) -> ArrayGeometry:
    """Resolve a preset name: ``single``, ``cylinder64``, ``ula<M>``, ``ring<M>``."""
    if name == "single":
        return single_element()
    match = _PRESET_RE.match(name)
    if not match:
        raise ValueError(f"unknown geometry preset {name!r}")
    kind, m = match.group(1), int(match.group(2))
    if m < 1:
        raise ValueError(f"preset {name!r} needs at least one element")
    if kind == "cylinder":
        if m % 4:
            raise ValueError("cylinder presets use 4 rows; M must be a multiple of 4")
        return cylinder(columns=m // 4, rows=4)
    if kind == "ula":
        return ula(m)
    return ring(m)


# -- CHP1 container ---------------------------------------------------------

_CHP_DIMS = struct.Struct("<8sIIII")


def write_chp(path, pat: ArrayPattern) -> None:
    path = Path(path)
    n_az, n_el, m, k = pat.shape
    parts = [
        _CHP_DIMS.pack(CHP_MAGIC, n_az, n_el, m, k),
        np.asarray(pat.az_grid, dtype="<f8").tobytes(),
        np.asarray(pat.el_grid, dtype="<f8").tobytes(),
        struct.pack("<dd", pat.freq_grid.f_start, pat.freq_grid.spacing),
        np.ascontiguousarray(pat.response, dtype="<c16").tobytes(order="C"),
    ]
    atomic_write_bytes(path, b"".join(parts))


def read_chp(path) -> ArrayPattern:
    raw = Path(path).read_bytes()
    if len(raw) < _CHP_DIMS.size:
        raise FormatError(f"{path}: truncated CHP1 header")
    magic, n_az, n_el, m, k = _CHP_DIMS.unpack_from(raw)
    if magic != CHP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    off = _CHP_DIMS.size
    expected = off + 8 * (n_az + n_el + 2) + 16 * n_az * n_el * m * k
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    az = np.frombuffer(raw, "<f8", n_az, off)
    off += 8 * n_az
    el = np.frombuffer(raw, "<f8", n_el, off)
    off += 8 * n_el
    f_start, spacing = struct.unpack_from("<dd", raw, off)
    off += 16
    resp = np.frombuffer(raw, "<c16", n_az * n_el * m * k, off).reshape(n_az, n_el, m, k)
    return ArrayPattern(resp.astype(np.complex128), az.astype(float), el.astype(float),
                        FrequencyGrid(f_start, spacing, k))
