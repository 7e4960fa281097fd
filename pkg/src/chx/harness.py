"""
Experiment orchestration: synthesize, estimate on a training band,
extrapolate to the full grid and score.

One pipeline run processes every UE independently (in a thread pool capped
by ``CHX_THREADS``), then assembles metrics in frequency order. Random draws
come from a per-UE `numpy.random.SeedSequence` child of the master seed, so
results do not depend on the number of workers.

A configuration file is a JSON object; every key is optional::

    {
      "grid": {"f_start_hz": 3.325e9, "spacing_hz": 125e3, "count": 2801},
      "geometry": "cylinder64",
      "ues": [{"preset": "LosDominant", "count": 4},
              {"scenario": "scenarios/ue9.json"},
              {"channel": "measured.chx", "ue_id": "building-a"}],
      "train_center_hz": 3.5e9, "train_width_hz": 35e6,
      "models": ["vss", "doa"], "paths": [1, 10],
      "snr_db": 20, "tx_snr_db": 100, "groups": [["ue0", "ue1"]],
      "seed": 7,
      "sage": {"n_delays": 4096, "max_cycles": 30, "tol": 1e-6,
               "refinement_levels": 2, "doa_sweeps": 2},
      "calibration": {"az_step_deg": 3, "el_deg": [-10, 0, 10],
                      "freq_spacing_hz": 5e6},
      "truth_manifold": "geometry",
      "summary_offsets_hz": [35e6, 105e6]
    }
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels
from ._io import atomic_write_text
from .array import ArrayPattern, geometry_preset, synth_calibration
from .core import (FrequencyGrid, Stage, TrainingBand, band_from_center, normalize,
                   read_chx, select_training_band)
from .errors import ChxError, ConfigInvalid, IoFailure, annotate
from .metrics import (METRIC_COLUMNS, LinkBudget, beamforming_efficiency_db_columns,
                      beamforming_gains_columns, metric_rows_to_csv, mse_db_columns,
                      precode_matrix, sinr, spectral_efficiency, to_db)
from .sage import Model, SageConfig, reconstruct_many, sage_run, write_estimate
from .synthesis import (PRESETS, Scenario, add_noise, read_scenario, scenario_preset,
                        synth_channel_doa, write_scenario)

__all__ = [
    "UeSpec", "SageSettings", "CalibrationSettings", "ExperimentConfig",
    "UeTruth", "RunTrace", "ExperimentReport", "load_config", "synthesize_ue",
    "calibration_pattern", "ue_seeds", "worker_cap", "run_pipeline", "emit_report",
]

DEFAULT_GRID = FrequencyGrid(3.325e9, 125e3, 2801)


def _fail(msg: str):
    raise ConfigInvalid(msg)


def _expect_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        _fail(f"{where} must be a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        _fail(f"unknown {where} keys: {', '.join(unknown)}")


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class UeSpec:
    """One UE: a random preset, a scenario JSON file, or a measured CHX1 channel."""

    ue_id: str
    preset: str | None = None
    seed: int | None = None
    n_paths: int | None = None
    scenario: str | None = None
    channel: str | None = None

    def __post_init__(self):
        sources = [s for s in (self.preset, self.scenario, self.channel) if s is not None]
        if len(sources) != 1:
            _fail(f"UE {self.ue_id!r} needs exactly one of preset, scenario or channel")
        if self.preset is not None and self.preset not in PRESETS:
            _fail(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.n_paths is not None and self.n_paths < 1:
            _fail("n_paths must be >= 1")

    def to_dict(self) -> dict:
        doc = {"ue_id": self.ue_id}
        for key in ("preset", "seed", "n_paths", "scenario", "channel"):
            if getattr(self, key) is not None:
                doc[key] = getattr(self, key)
        return doc


@dataclass(frozen=True)
class SageSettings:
    n_delays: int = 4096
    max_cycles: int = 30
    tol: float = 1e-6
    refinement_levels: int = 2
    doa_sweeps: int = 2


@dataclass(frozen=True)
class CalibrationSettings:
    """Angle and frequency spacing of the synthesized calibration pattern."""

    az_step_deg: float = 3.0
    el_deg: tuple = (-10.0, 0.0, 10.0)
    freq_spacing_hz: float = 5e6


@dataclass(frozen=True)
class ExperimentConfig:
    grid: FrequencyGrid = DEFAULT_GRID
    geometry: str = "cylinder64"
    ues: tuple = ()
    train_center_hz: float | None = None
    train_width_hz: float = 35e6
    models: tuple = (Model.VSS,)
    paths: tuple = (1,)
    snr_db: float | None = None
    groups: tuple = ()
    tx_snr_db: float = 100.0
    seed: int = 0
    out: str | None = None
    sage: SageSettings = SageSettings()
    calibration: CalibrationSettings = CalibrationSettings()
    truth_manifold: str = "geometry"
    el_max_deg: float = 10.0
    max_delay_s: float = 1e-6
    summary_offsets_hz: tuple = (35e6, 70e6, 105e6, 140e6)
    cond_cap: float = 1e12
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        try:
            geometry_preset(self.geometry)
        except ValueError as exc:
            _fail(str(exc))
        object.__setattr__(self, "models", tuple(Model(m) for m in self.models))
        object.__setattr__(self, "paths", tuple(int(v) for v in self.paths))
        object.__setattr__(self, "ues", tuple(self.ues))
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        if not self.models:
            _fail("at least one model is required")
        if not self.paths or min(self.paths) < 1:
            _fail("every L in the path sweep must be >= 1")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            _fail("snr_db must be finite (use null for a noiseless run)")
        if not math.isfinite(self.tx_snr_db):
            _fail("tx_snr_db must be finite")
        if int(self.seed) != self.seed or self.seed < 0:
            _fail("seed must be a non-negative integer")
        if self.truth_manifold not in ("geometry", "pattern"):
            _fail("truth_manifold must be 'geometry' or 'pattern'")
        if self.sage.n_delays < 1 or self.sage.max_cycles < 1:
            _fail("sage.n_delays and sage.max_cycles must be >= 1")
        ids = [u.ue_id for u in self.ues]
        if len(set(ids)) != len(ids):
            _fail("UE ids must be unique")
        seen = set()
        for g in self.groups:
            for ue in g:
                if ue not in ids:
                    _fail(f"group member {ue!r} is not a configured UE")
                if ue in seen:
                    _fail(f"UE {ue!r} appears in more than one group")
                seen.add(ue)
        for u in self.ues:
            for path in (u.scenario, u.channel):
                if path is not None and not self.resolve(path).is_file():
                    _fail(f"referenced file does not exist: {path}")
        self.band  # validates the training band
        for off in self.summary_offsets_hz:
            d = off / self.grid.spacing
            if off <= 0 or abs(d - round(d)) > 1e-6:
                _fail(f"summary offset {off} Hz is not a positive multiple of the spacing")

    @property
    def center_hz(self) -> float:
        if self.train_center_hz is not None:
            return float(self.train_center_hz)
        return self.grid.f_start + 0.5 * self.grid.bandwidth

    @property
    def band(self) -> TrainingBand:
        try:
            return band_from_center(self.grid, self.center_hz, self.train_width_hz)
        except ChxError as exc:
            raise ConfigInvalid(f"invalid training band: {exc}") from exc

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def groups_with_singles(self) -> list[tuple[str, ...]]:
        """Multiuser groups, then every ungrouped UE as a group of one."""
        grouped = {ue for g in self.groups for ue in g}
        return list(self.groups) + [(u.ue_id,) for u in self.ues if u.ue_id not in grouped]

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        _expect_keys(doc, {"grid", "geometry", "ues", "train_center_hz", "train_width_hz",
                           "models", "paths", "snr_db", "groups", "tx_snr_db", "seed",
                           "out", "sage", "calibration", "truth_manifold", "el_max_deg",
                           "max_delay_s", "summary_offsets_hz", "cond_cap"}, "config")
        try:
            kw = {}
            if "grid" in doc:
                g = doc["grid"]
                _expect_keys(g, {"f_start_hz", "spacing_hz", "count"}, "grid")
                kw["grid"] = FrequencyGrid(float(g["f_start_hz"]), float(g["spacing_hz"]),
                                           int(g["count"]))
            for key in ("geometry", "truth_manifold", "out"):
                if key in doc:
                    kw[key] = None if doc[key] is None else str(doc[key])
            for key in ("train_center_hz", "train_width_hz", "tx_snr_db", "el_max_deg",
                        "max_delay_s", "cond_cap"):
                if key in doc and doc[key] is not None:
                    kw[key] = float(doc[key])
            if "snr_db" in doc:
                kw["snr_db"] = None if doc["snr_db"] is None else float(doc["snr_db"])
            if "seed" in doc:
                kw["seed"] = int(doc["seed"])
            if "models" in doc:
                kw["models"] = tuple(Model(str(m).lower()) for m in _as_list(doc["models"]))
            if "paths" in doc:
                kw["paths"] = tuple(int(v) for v in _as_list(doc["paths"]))
            if "groups" in doc:
                kw["groups"] = tuple(tuple(str(u) for u in g) for g in doc["groups"])
            if "summary_offsets_hz" in doc:
                kw["summary_offsets_hz"] = tuple(float(v) for v in doc["summary_offsets_hz"])
            if "sage" in doc:
                _expect_keys(doc["sage"], set(SageSettings.__dataclass_fields__), "sage")
                kw["sage"] = SageSettings(**doc["sage"])
            if "calibration" in doc:
                c = dict(doc["calibration"])
                _expect_keys(c, set(CalibrationSettings.__dataclass_fields__), "calibration")
                if "el_deg" in c:
                    c["el_deg"] = tuple(float(v) for v in c["el_deg"])
                kw["calibration"] = CalibrationSettings(**c)
            kw["ues"] = _expand_ues(doc.get("ues", []), base_dir)
        except ConfigInvalid:
            raise
        except (KeyError, TypeError, ValueError, ChxError) as exc:
            raise ConfigInvalid(f"invalid config: {exc}") from exc
        return cls(base_dir=str(base_dir), **kw)

    def to_dict(self) -> dict:
        return {
            "grid": {"f_start_hz": self.grid.f_start, "spacing_hz": self.grid.spacing,
                     "count": self.grid.count},
            "geometry": self.geometry,
            "ues": [u.to_dict() for u in self.ues],
            "train_center_hz": self.center_hz,
            "train_width_hz": self.train_width_hz,
            "models": [m.value for m in self.models],
            "paths": list(self.paths),
            "snr_db": self.snr_db,
            "groups": [list(g) for g in self.groups],
            "tx_snr_db": self.tx_snr_db,
            "seed": self.seed,
            "out": self.out,
            "sage": vars(self.sage).copy(),
            "calibration": {**vars(self.calibration),
                            "el_deg": list(self.calibration.el_deg)},
            "truth_manifold": self.truth_manifold,
            "el_max_deg": self.el_max_deg,
            "max_delay_s": self.max_delay_s,
            "summary_offsets_hz": list(self.summary_offsets_hz),
            "cond_cap": self.cond_cap,
        }


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _expand_ues(entries, base_dir) -> tuple:
    out = []
    for entry in entries:
        _expect_keys(entry, {"ue_id", "preset", "seed", "n_paths", "scenario", "channel",
                             "count"}, "ue")
        count = int(entry.get("count", 1))
        if count < 1:
            _fail("UE count must be >= 1")
        if count > 1 and ("ue_id" in entry or "seed" in entry):
            _fail("ue_id and seed cannot be combined with count > 1")
        for _ in range(count):
            ue_id = entry.get("ue_id")
            if ue_id is None and "scenario" in entry:
                path = Path(entry["scenario"])
                path = path if path.is_absolute() else Path(base_dir) / path
                if path.is_file():
                    ue_id = read_scenario(path).ue_id
            out.append(UeSpec(
                ue_id=str(ue_id if ue_id is not None else f"ue{len(out)}"),
                preset=entry.get("preset"),
                seed=None if entry.get("seed") is None else int(entry["seed"]),
                n_paths=None if entry.get("n_paths") is None else int(entry["n_paths"]),
                scenario=entry.get("scenario"),
                channel=entry.get("channel")))
    return tuple(out)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config; `overrides` are applied on top (used for ``--seed``)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"{path} must contain a JSON object")
    doc.update(overrides or {})
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


# -- per-UE work ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UeTruth:
    ue_id: str
    scenario: Scenario | None
    truth: object          # ChannelMatrix, noiseless
    measured: object       # ChannelMatrix, with noise if configured


def ue_seeds(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    """(scenario seed, noise seed) for every UE, spawned from the master seed."""
    children = np.random.SeedSequence(cfg.seed).spawn(len(cfg.ues))
    return [tuple(int(v) for v in c.generate_state(2)) for c in children]


def calibration_pattern(cfg: ExperimentConfig) -> ArrayPattern:
    """Synthesized calibration of `cfg.geometry` spanning the whole measured grid."""
    cal = cfg.calibration
    n_az = 360.0 / cal.az_step_deg
    if cal.az_step_deg <= 0 or abs(n_az - round(n_az)) > 1e-9:
        _fail("calibration.az_step_deg must divide 360")
    az = np.deg2rad(np.arange(int(round(n_az))) * cal.az_step_deg)
    el = np.deg2rad(np.asarray(cal.el_deg, dtype=float))
    bw = cfg.grid.bandwidth
    n_f = max(2, int(math.ceil(bw / cal.freq_spacing_hz - 1e-9)) + 1)
    spacing = bw / (n_f - 1) if bw > 0 else cal.freq_spacing_hz
    fgrid = FrequencyGrid(cfg.grid.f_start, spacing, n_f)
    return synth_calibration(geometry_preset(cfg.geometry), az, el, fgrid)


def synthesize_ue(cfg: ExperimentConfig, index: int, seeds=None, manifold=None) -> UeTruth:
    """Ground truth and measurement of UE `index` of `cfg`."""
    spec = cfg.ues[index]
    sc_seed, noise_seed = (seeds or ue_seeds(cfg))[index]
    if spec.channel is not None:
        truth = read_chx(cfg.resolve(spec.channel))
        if truth.grid != cfg.grid:
            _fail(f"channel {spec.channel} is not on the configured grid")
        if truth.stage is Stage.RAW:
            _fail(f"channel {spec.channel} is raw; compensate the RF response first")
        scenario = None
    else:
        if spec.scenario is not None:
            scenario = read_scenario(cfg.resolve(spec.scenario))
            if scenario.geometry_preset != cfg.geometry:
                _fail(f"scenario {spec.scenario} uses geometry {scenario.geometry_preset!r}, "
                      f"config uses {cfg.geometry!r}")
            scenario = replace(scenario, ue_id=spec.ue_id)
        else:
            seed = spec.seed if spec.seed is not None else sc_seed
            scenario = scenario_preset(spec.preset, 1, seed, n_paths=spec.n_paths,
                                       el_max=np.deg2rad(cfg.el_max_deg),
                                       max_delay=cfg.max_delay_s, ue_id=spec.ue_id)
            scenario = replace(scenario, geometry_preset=cfg.geometry)
        if manifold is None:
            manifold = (geometry_preset(cfg.geometry) if cfg.truth_manifold == "geometry"
                        else calibration_pattern(cfg))
        truth = synth_channel_doa(scenario.paths, manifold, cfg.grid)
    measured = truth if cfg.snr_db is None else add_noise(truth, cfg.snr_db, noise_seed)
    return UeTruth(spec.ue_id, scenario, truth, measured)


def _run_label(model: Model, L: int) -> str:
    return f"{model.value}_L{L}"


def _process_ue(cfg, index, seeds, manifold, pattern):
    ue_id = cfg.ues[index].ue_id
    timings = {}
    t0 = time.perf_counter()
    try:
        ue = synthesize_ue(cfg, index, seeds, manifold)
    except Exception as exc:
        raise annotate(exc, f"{ue_id}: synthesize")
    timings["synthesize_s"] = time.perf_counter() - t0
    try:
        h_n, mu = normalize(ue.measured)
        band = cfg.band
        h_u = select_training_band(h_n, band)
    except Exception as exc:
        raise annotate(exc, f"{ue_id}: preprocess")
    truth_n = ue.truth.data / mu
    freqs = cfg.grid.frequencies
    runs = {}
    for model in cfg.models:
        for L in cfg.paths:
            label = _run_label(model, L)
            pat = pattern if model is Model.DOA else None
            t0 = time.perf_counter()
            try:
                scfg = SageConfig.default(
                    model, L, h_u.grid, cfg.sage.n_delays, max_cycles=cfg.sage.max_cycles,
                    convergence_tol=cfg.sage.tol,
                    refinement_levels=cfg.sage.refinement_levels,
                    doa_sweeps=cfg.sage.doa_sweeps)
                est = sage_run(h_u, scfg, pat)
            except Exception as exc:
                raise annotate(exc, f"{ue_id}: estimate {label}")
            t1 = time.perf_counter()
            try:
                recon = reconstruct_many(est, freqs, pat)
            except Exception as exc:
                raise annotate(exc, f"{ue_id}: extrapolate {label}")
            timings[f"estimate_{label}_s"] = t1 - t0
            timings[f"extrapolate_{label}_s"] = time.perf_counter() - t1
            est = replace(est, extra={
                "ue_id": ue_id, "mu": mu, "band_offset": band.offset,
                "band_width": band.width,
                "grid": {"f_start_hz": cfg.grid.f_start, "spacing_hz": cfg.grid.spacing,
                         "count": cfg.grid.count}})
            runs[label] = (est, recon)
    return ue, mu, truth_n, runs, timings


def worker_cap() -> int:
    """Worker count: ``CHX_THREADS`` if set, else the CPU count."""
    raw = os.environ.get("CHX_THREADS", "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigInvalid(f"CHX_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigInvalid("CHX_THREADS must be >= 1")
    return n


# -- report -----------------------------------------------------------------

@dataclass(eq=False)
class RunTrace:
    """Metrics of one (model, L) combination; every array is (N_ue, K)."""

    model: Model
    L: int
    metrics: dict
    estimates: dict

    @property
    def label(self) -> str:
        return _run_label(self.model, self.L)


@dataclass(eq=False)
class ExperimentReport:
    config: ExperimentConfig
    grid: FrequencyGrid
    band: TrainingBand
    ue_ids: tuple
    scenarios: dict
    mus: dict
    runs: dict
    timings: dict

    def rows(self, label: str) -> list[dict]:
        """Metric rows in frequency order, UEs in configuration order."""
        run = self.runs[label]
        freqs = self.grid.frequencies
        out = []
        for k in range(self.grid.count):
            for i, ue in enumerate(self.ue_ids):
                row = {"f_Hz": freqs[k], "ue_id": ue}
                for c in METRIC_COLUMNS[2:]:
                    row[c] = run.metrics[c][i, k]
                out.append(row)
        return out

    def csv_text(self, label: str) -> str:
        return metric_rows_to_csv(self.rows(label))

    def offset_indices(self, offset_hz: float) -> list[int]:
        """Grid indices `offset_hz` below and above the training band edges."""
        d = int(round(offset_hz / self.grid.spacing))
        idx = [self.band.start - d, self.band.stop - 1 + d]
        return [k for k in idx if 0 <= k < self.grid.count]

    def summary(self) -> dict:
        bands = [("in_band", 0.0, list(range(self.band.start, self.band.stop)))]
        bands += [(f"offset_{off:g}Hz", off, self.offset_indices(off))
                  for off in self.config.summary_offsets_hz]
        runs = []
        for label, run in self.runs.items():
            entries = []
            for name, off, idx in bands:
                m = {c: run.metrics[c][:, idx].reshape(-1) for c in METRIC_COLUMNS[2:]}
                be = m["be_db"]
                entries.append({
                    "band": name, "offset_hz": off, "frequency_indices": idx,
                    "be_db": {**_stats(be), "mean_linear_db": _mean_linear_db(be)},
                    "be_db_values": sorted(float(v) for v in be),
                    "mse_db": {**_stats(m["mse_db"]),
                               "mean_linear_db": _mean_linear_db(m["mse_db"])},
                    "se_mr": _stats(m["se_mr"]),
                    "se_zf": _stats(m["se_zf"]),
                })
            runs.append({"run": label, "model": run.model.value, "L": run.L,
                         "bands": entries})
        return {"grid": self.config.to_dict()["grid"],
                "band": {"offset": self.band.offset, "width": self.band.width},
                "ue_ids": list(self.ue_ids), "runs": runs}

    def diagnostics(self) -> dict:
        per_run = {}
        for label, run in self.runs.items():
            per_run[label] = {ue: {"cycles_run": est.cycles_run,
                                   "converged": est.converged,
                                   "residual_energy_trace": list(est.residual_energy_trace)}
                              for ue, est in run.estimates.items()}
        return {"mu": dict(self.mus), "runs": per_run, "timings_s": self.timings}


def _quantile(sorted_vals: np.ndarray, q: float) -> float:
    # linear interpolation that keeps equal infinite neighbours finite-safe
    pos = q * (sorted_vals.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, sorted_vals.size - 1)
    a, b = float(sorted_vals[lo]), float(sorted_vals[hi])
    if a == b or pos == lo:
        return a
    return a + (pos - lo) * (b - a)


def _stats(values) -> dict:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return {"count": 0, "median": None, "p10": None, "p25": None, "p75": None,
                "p90": None, "min": None, "max": None, "mean": None}
    out = {"count": int(v.size)}
    for name, q in (("median", 0.5), ("p10", 0.1), ("p25", 0.25), ("p75", 0.75),
                    ("p90", 0.9)):
        out[name] = _quantile(v, q)
    out["min"] = float(v[0])
    out["max"] = float(v[-1])
    with np.errstate(invalid="ignore"):
        out["mean"] = float(np.mean(v))
    return out


def _mean_linear_db(values_db) -> float | None:
    v = np.asarray(values_db, dtype=float)
    if v.size == 0:
        return None
    return to_db(np.mean(10.0 ** (v / 10.0)))


def _score(cfg, label, results, index_of):
    """Column-wise metrics of one run for every UE, shape (N_ue, K) each."""
    n, k = len(results), cfg.grid.count
    cols = {c: np.empty((n, k)) for c in METRIC_COLUMNS[2:]}
    for i, (ue, mu, truth_n, runs, _) in enumerate(results):
        recon = runs[label][1]
        try:
            cols["mse_db"][i] = mse_db_columns(truth_n, recon)
            cols["be_db"][i] = beamforming_efficiency_db_columns(truth_n, recon)
            meas, est, uni = beamforming_gains_columns(truth_n, recon)
        except Exception as exc:
            raise annotate(exc, f"{ue.ue_id}: score {label}")
        cols["bg_meas"][i], cols["bg_est"][i], cols["bg_uni"][i] = meas, est, uni
    lb = LinkBudget(cfg.tx_snr_db)
    for group in cfg.groups_with_singles():
        members = [index_of[u] for u in group]
        # (K, M, N) stacks of true and reconstructed channels
        h_true = np.stack([results[i][2].T for i in members], axis=-1)
        h_est = np.stack([results[i][3][label][1].T for i in members], axis=-1)
        for scheme, db_col, se_col in (("MR", "sinr_db_mr", "se_mr"),
                                       ("ZF", "sinr_db_zf", "se_zf")):
            try:
                g = precode_matrix(h_est, scheme, cfg.cond_cap)
            except Exception as exc:
                raise annotate(exc, f"group {'+'.join(group)}: precode {scheme} {label}")
            s = sinr(h_true, g, lb)                      # (K, N)
            for j, i in enumerate(members):
                cols[db_col][i] = to_db(s[:, j])
                cols[se_col][i] = spectral_efficiency(s[:, j])
    return cols


def run_pipeline(cfg: ExperimentConfig) -> ExperimentReport:
    """Synthesize, estimate, extrapolate and score every UE of `cfg`."""
    t_start = time.perf_counter()
    cap = worker_cap()
    _kernels.set_threads(cap)
    seeds = ue_seeds(cfg)
    timings = {}
    t0 = time.perf_counter()
    pattern = None
    try:
        if Model.DOA in cfg.models or cfg.truth_manifold == "pattern":
            pattern = calibration_pattern(cfg)
        manifold = pattern if cfg.truth_manifold == "pattern" else geometry_preset(cfg.geometry)
    except Exception as exc:
        raise annotate(exc, "calibration")
    timings["calibration_s"] = time.perf_counter() - t0

    workers = max(1, min(cap, len(cfg.ues)))
    indices = range(len(cfg.ues))
    task = lambda i: _process_ue(cfg, i, seeds, manifold, pattern)  # noqa: E731
    if workers == 1:
        results = [task(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, indices))   # map keeps input order
    timings["ues"] = {r[0].ue_id: r[4] for r in results}

    t0 = time.perf_counter()
    index_of = {u.ue_id: i for i, u in enumerate(cfg.ues)}
    runs = {}
    for model in cfg.models:
        for L in cfg.paths:
            label = _run_label(model, L)
            metrics = (_score(cfg, label, results, index_of) if results else
                       {c: np.empty((0, cfg.grid.count)) for c in METRIC_COLUMNS[2:]})
            estimates = {r[0].ue_id: r[3][label][0] for r in results}
            runs[label] = RunTrace(model, L, metrics, estimates)
    timings["score_s"] = time.perf_counter() - t0
    timings["total_s"] = time.perf_counter() - t_start
    return ExperimentReport(
        config=cfg, grid=cfg.grid, band=cfg.band,
        ue_ids=tuple(u.ue_id for u in cfg.ues),
        scenarios={r[0].ue_id: r[0].scenario for r in results},
        mus={r[0].ue_id: r[1] for r in results},
        runs=runs, timings=timings)


def _json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def emit_report(rep: ExperimentReport, out_dir) -> list[Path]:
    """Write CSVs, estimates, scenarios, config echo, summary and diagnostics.

    Returns the written paths. Each file is written atomically.
    """
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)

        def put(rel, text):
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            atomic_write_text(path, text)
            written.append(path)

        put("config.json", _json(rep.config.to_dict()))
        for label, run in rep.runs.items():
            put(f"metrics_{label}.csv", rep.csv_text(label))
            for ue, est in run.estimates.items():
                path = out / "estimates" / f"{ue}_{label}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_estimate(path, est)
                written.append(path)
        for ue, sc in rep.scenarios.items():
            if sc is not None:
                path = out / "scenarios" / f"{ue}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_scenario(path, sc)
                written.append(path)
        put("summary.json", _json(rep.summary()))
        put("diagnostics.json", _json(rep.diagnostics()))
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written
