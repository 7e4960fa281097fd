"""
Ground-truth channel generation from planted multipath components.

This module is the forward oracle for the estimator. It deliberately does not
share any summation code with `chx.sage`, so that each can check the other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .array import (ArrayGeometry, ArrayPattern, geometry_preset, pattern_lookup_many,
                    steering_response)
from .core import ChannelMatrix, FrequencyGrid, Stage
from .errors import DimensionMismatch, FormatError

__all__ = [
    "MpcDoa", "MpcVss", "Scenario", "PRESETS", "synth_channel_doa", "synth_channel_vss",
    "add_noise", "scenario_preset", "preset_geometry_name",
    "scenario_to_dict", "scenario_from_dict", "write_scenario", "read_scenario",
]

MAX_DELAY = 1e-6
PRESETS = ("LosDominant", "Olos", "NlosRich")


@dataclass(frozen=True)
class MpcDoa:
    """One path of the DOA model: amplitude, delay, azimuth, elevation."""

    alpha: complex
    tau: float
    phi: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau >= 0):
            raise ValueError(f"delay must be finite and >= 0, got {self.tau}")
        if not (math.isfinite(self.phi) and math.isfinite(self.theta)):
            raise ValueError("path angles must be finite")
        object.__setattr__(self, "alpha", complex(self.alpha))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "theta", float(self.theta))


@dataclass(frozen=True, eq=False)
class MpcVss:
    """One path of the VSS model: a frequency-flat spatial signature and a delay."""

    a_vec: np.ndarray
    tau: float

    def __post_init__(self):
        a = np.array(self.a_vec, dtype=np.complex128).reshape(-1)
        if not (math.isfinite(self.tau) and self.tau >= 0):
            raise ValueError(f"delay must be finite and >= 0, got {self.tau}")
        a.setflags(write=False)
        object.__setattr__(self, "a_vec", a)
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def M(self) -> int:
        return self.a_vec.size


@dataclass(frozen=True)
class Scenario:
    name: str
    paths: tuple
    geometry_preset: str
    seed: int = 0
    ue_id: str = "ue0"

    def __post_init__(self):
        if not self.paths:
            raise ValueError("a scenario needs at least one path")
        object.__setattr__(self, "paths", tuple(self.paths))

    def geometry(self) -> ArrayGeometry:
        return geometry_preset(self.geometry_preset)


def synth_channel_doa(paths, manifold, grid: FrequencyGrid) -> ChannelMatrix:
    """Sum of plane waves through a calibration pattern or an exact geometry.

    Parameters
    ----------
    paths : sequence of MpcDoa
    manifold : ArrayPattern or ArrayGeometry
        A pattern is interpolated (and raises `OutOfHull` outside its range);
        a geometry gives exact plane-wave steering vectors.
    grid : FrequencyGrid
    """
    freqs = grid.frequencies
    m = manifold.M
    out = np.zeros((m, grid.count), dtype=np.complex128)
    for p in paths:
        if isinstance(manifold, ArrayPattern):
            resp = pattern_lookup_many(manifold, p.phi, p.theta, freqs)
        else:
            resp = steering_response(manifold, p.phi, p.theta, freqs)
        out += p.alpha * resp * np.exp(-2j * np.pi * freqs * p.tau)[None, :]
    return ChannelMatrix(out, grid, Stage.COMPENSATED)


def synth_channel_vss(paths, grid: FrequencyGrid) -> ChannelMatrix:
    paths = list(paths)
    if not paths:
        raise DimensionMismatch("no paths given")
    m = paths[0].M
    if any(p.M != m for p in paths):
        raise DimensionMismatch("spatial signatures have different lengths")
    freqs = grid.frequencies
    out = np.zeros((m, grid.count), dtype=np.complex128)
    for p in paths:
        out += p.a_vec[:, None] * np.exp(-2j * np.pi * freqs * p.tau)[None, :]
    return ChannelMatrix(out, grid, Stage.COMPENSATED)


def add_noise(h: ChannelMatrix, snr_db: float, seed: int) -> ChannelMatrix:
    """Add complex white Gaussian noise at `snr_db` below the mean sample power.

    ``snr_db = math.inf`` returns `h` unchanged.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return h
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    power = float(np.mean(np.abs(h.data) ** 2))
    var = power * 10.0 ** (-snr_db / 10.0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(h.data.shape) + 1j * rng.standard_normal(h.data.shape)
    return ChannelMatrix(h.data + np.sqrt(var / 2.0) * noise, h.grid, h.stage)


def preset_geometry_name(m: int) -> str:
    if m == 1:
        return "single"
    if m == 64:
        return "cylinder64"
    return f"ring{m}"


def scenario_preset(name: str, m: int, seed: int, n_paths: int | None = None,
                    el_max: float = np.deg2rad(10.0), max_delay: float = MAX_DELAY,
                    decay: float = 250e-9, ue_id: str = "ue0") -> Scenario:
    """Random path set shaped like a LOS, obstructed-LOS or rich NLOS channel.

    ============  ================================================================
    LosDominant   one unit path plus 2-4 paths 10-20 dB weaker; the strong path is
                  the earliest
    Olos          3-6 paths with powers within 3 dB of each other
    NlosRich      15-25 paths (or `n_paths`) with power ``exp(-tau / decay)``
    ============  ================================================================

    Delays are uniform on ``[0, max_delay]``, azimuths uniform on ``[0, 2 pi)``
    and elevations uniform on ``[-el_max, el_max]``. Phases are uniform.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    rng = np.random.default_rng(seed)
    if name == "LosDominant":
        n = int(rng.integers(2, 5)) + 1 if n_paths is None else int(n_paths)
        rel_db = np.concatenate([[0.0], rng.uniform(-20.0, -10.0, n - 1)])
        taus = np.sort(rng.uniform(0.0, max_delay, n))
    elif name == "Olos":
        n = int(rng.integers(3, 7)) if n_paths is None else int(n_paths)
        rel_db = rng.uniform(-3.0, 0.0, n)
        taus = rng.uniform(0.0, max_delay, n)
    else:
        n = int(rng.integers(15, 26)) if n_paths is None else int(n_paths)
        taus = rng.uniform(0.0, max_delay, n)
        rel_db = 10.0 * np.log10(np.exp(-taus / decay))
    phases = rng.uniform(0.0, 2 * np.pi, n)
    phis = rng.uniform(0.0, 2 * np.pi, n)
    thetas = rng.uniform(-el_max, el_max, n)
    amps = 10.0 ** (rel_db / 20.0) * np.exp(1j * phases)
    paths = tuple(MpcDoa(complex(a), float(t), float(p), float(e))
                  for a, t, p, e in zip(amps, taus, phis, thetas))
    return Scenario(name, paths, preset_geometry_name(m), int(seed), ue_id)


# -- scenario JSON ----------------------------------------------------------

def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "seed": sc.seed,
        "ue_id": sc.ue_id,
        "geometry_preset": sc.geometry_preset,
        "paths": [{"alpha_re": p.alpha.real, "alpha_im": p.alpha.imag, "tau_s": p.tau,
                   "phi_rad": p.phi, "theta_rad": p.theta} for p in sc.paths],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        paths = [MpcDoa(complex(float(p["alpha_re"]), float(p["alpha_im"])), float(p["tau_s"]),
                        float(p["phi_rad"]), float(p["theta_rad"])) for p in doc["paths"]]
        return Scenario(str(doc["name"]), tuple(paths), str(doc["geometry_preset"]),
                        int(doc.get("seed", 0)), str(doc.get("ue_id", "ue0")))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid scenario document: {exc}") from exc


def write_scenario(path, sc: Scenario) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    atomic_write_text(path, json.dumps(scenario_to_dict(sc), indent=2) + "\n")


def read_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
