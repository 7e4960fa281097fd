"""
SAGE estimation of multipath parameters on a training band.

Two channel models are supported:

* ``vss`` -- each path is a frequency-flat M x 1 spatial signature ``a`` and a
  delay ``tau``; the channel is ``sum_v a_v exp(-j 2 pi f tau_v)``.
* ``doa`` -- each path is an amplitude, delay, azimuth and elevation, mapped
  through a calibration pattern ``A(phi, theta, f)``.

The estimator follows the usual SAGE structure: successive cancellation for
the initial estimate, then iteration cycles where every path is re-estimated
in turn against the measurement with all other paths cancelled. Every
maximization step keeps the incumbent as a candidate, so the residual energy
never increases.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from ._io import atomic_write_text
from .array import ArrayPattern, pattern_at_frequencies, pattern_lookup_many
from .core import ChannelMatrix, FrequencyGrid
from .errors import (FormatError, GridEmpty, GridInvalid, IndexOutOfRange, OutOfHull,
                     PatternMissing)
from .synthesis import MpcDoa, MpcVss

__all__ = [
    "Model", "SageConfig", "SageEstimate", "default_delay_grid", "sage_init", "sage_run",
    "expectation_step", "maximize_vss", "maximize_doa", "reconstruct", "reconstruct_many",
    "estimate_to_dict", "estimate_from_dict", "write_estimate", "read_estimate",
]

_REFINE_FACTOR = 10
# a candidate must beat the incumbent by more than the objective's rounding error
_MARGIN = 1e-11


class Model(str, enum.Enum):
    VSS = "vss"
    DOA = "doa"


def default_delay_grid(train_grid: FrequencyGrid, n: int = 4096) -> np.ndarray:
    """`n` uniform delays covering the unambiguous range ``[0, 1 / spacing)``."""
    return np.arange(n) / (n * train_grid.spacing)


@dataclass(frozen=True, eq=False)
class SageConfig:
    """Search grids and iteration control for one SAGE run.

    `az_grid` / `el_grid` select a subset of the calibration nodes for the
    DOA model (``None`` uses every node). Angles are never interpolated by
    the estimator; only the delay is refined.
    """

    model: Model
    L: int
    delay_grid: np.ndarray
    az_grid: np.ndarray | None = None
    el_grid: np.ndarray | None = None
    max_cycles: int = 30
    convergence_tol: float = 1e-6
    refinement_levels: int = 2
    doa_sweeps: int = 2

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        grid = np.array(self.delay_grid, dtype=float).reshape(-1)
        grid.setflags(write=False)
        object.__setattr__(self, "delay_grid", grid)
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if self.refinement_levels < 0:
            raise ValueError("refinement_levels must be >= 0")

    @classmethod
    def default(cls, model, L: int, train_grid: FrequencyGrid, n_delays: int = 4096,
                **kwargs) -> "SageConfig":
        return cls(Model(model), L, default_delay_grid(train_grid, n_delays), **kwargs)

    def check_delays(self, train_grid: FrequencyGrid) -> None:
        grid = self.delay_grid
        if grid.size == 0:
            raise GridEmpty("delay grid is empty")
        if np.any(np.diff(grid) <= 0):
            raise GridInvalid("delay grid must be strictly ascending")
        if grid[0] < 0 or grid[-1] >= 1.0 / train_grid.spacing:
            raise GridInvalid("delay grid must lie within [0, 1/spacing) of the training grid")


@dataclass(frozen=True, eq=False)
class SageEstimate:
    model: Model
    params: tuple
    residual_energy_trace: tuple = ()
    cycles_run: int = 0
    converged: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.params)

    def parameter_vector(self) -> np.ndarray:
        """All real-valued degrees of freedom (2ML + L for VSS, 5L for DOA)."""
        chunks = []
        for p in self.params:
            if self.model is Model.VSS:
                chunks += [p.a_vec.real, p.a_vec.imag, [p.tau]]
            else:
                chunks.append([p.alpha.real, p.alpha.imag, p.tau, p.phi, p.theta])
        return np.concatenate([np.asarray(c, float) for c in chunks]) if chunks else np.zeros(0)


# -- delay searches ---------------------------------------------------------

def _local_step(grid: np.ndarray, idx: int) -> float:
    if grid.size == 1:
        return 0.0
    gaps = []
    if idx > 0:
        gaps.append(grid[idx] - grid[idx - 1])
    if idx < grid.size - 1:
        gaps.append(grid[idx + 1] - grid[idx])
    return float(min(gaps))


def _delay_search(objective, grid: np.ndarray, levels: int, incumbent: float | None):
    """Grid argmax of `objective` followed by `levels` rounds of x10 subdivision.

    Returns ``(tau, value)``. Ties go to the smallest candidate index, and
    the incumbent wins unless a candidate is strictly better.
    """
    if grid.size == 0:
        raise GridEmpty("delay grid is empty")
    values = objective(grid)
    idx = int(np.argmax(values))
    best_tau, best_val = float(grid[idx]), float(values[idx])
    step = _local_step(grid, idx)
    for _ in range(levels):
        if step <= 0:
            break
        step /= _REFINE_FACTOR
        cand = best_tau + step * np.arange(-_REFINE_FACTOR, _REFINE_FACTOR + 1)
        cand = cand[cand >= 0]
        vals = objective(cand)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_tau, best_val = float(cand[j]), float(vals[j])
    if incumbent is not None:
        inc_val = float(objective(np.array([incumbent]))[0])
        if not best_val > inc_val + _MARGIN * abs(inc_val):
            best_tau, best_val = float(incumbent), inc_val
    return best_tau, best_val


def _lag_sums(x: np.ndarray) -> np.ndarray:
    """``r[d] = sum_m sum_k conj(x[m, k]) x[m, k + d]`` for ``d = 0 .. K-1``."""
    k = x.shape[1]
    n = 1 << int(np.ceil(np.log2(2 * k)))
    spec = np.fft.fft(x, n=n, axis=1)
    return np.fft.ifft(np.sum(np.abs(spec) ** 2, axis=0))[:k]


def _vss_objective(x: np.ndarray, train_grid: FrequencyGrid):
    """Callable giving ``||a(tau)||^2`` for the closed-form signature ``a(tau)``."""
    k = x.shape[1]
    r = _lag_sums(x)
    r0 = float(np.vdot(x, x).real)
    r[0] = r0
    df = train_grid.spacing

    def objective(taus):
        p = _kernels.trig_poly(r, df, taus)
        return (2.0 * p.real - r0) / (k * k)

    return objective


def _vss_signature(x: np.ndarray, freqs: np.ndarray, tau: float) -> np.ndarray:
    return x @ np.exp(2j * np.pi * freqs * tau) / x.shape[1]


def maximize_vss(x, delay_grid, train_grid: FrequencyGrid, refinement_levels: int = 2,
                 incumbent: MpcVss | None = None) -> MpcVss:
    """Maximization step of the VSS model.

    For each candidate delay the least-squares signature is the frequency
    correlation ``a(tau) = mean_k x[:, k] exp(+j 2 pi f_k tau)``; the delay
    maximizing ``||a(tau)||^2`` is kept and then refined locally.
    """
    x = np.asarray(x, dtype=np.complex128)
    grid = np.asarray(delay_grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise GridEmpty("delay grid is empty")
    if x.ndim != 2 or x.shape[1] != train_grid.count:
        raise GridInvalid(f"x has shape {x.shape}; expected (M, {train_grid.count})")
    objective = _vss_objective(x, train_grid)
    tau, _ = _delay_search(objective, grid, refinement_levels,
                           None if incumbent is None else incumbent.tau)
    return MpcVss(_vss_signature(x, train_grid.frequencies, tau), tau)


class _DoaSearch:
    """Pattern restricted to the search nodes and sampled on the training band."""

    def __init__(self, pattern: ArrayPattern, cfg: SageConfig, train_grid: FrequencyGrid):
        self.train_grid = train_grid
        self.freqs = train_grid.frequencies
        self.az_idx = _node_indices(pattern.az_grid, cfg.az_grid, "azimuth")
        self.el_idx = _node_indices(pattern.el_grid, cfg.el_grid, "elevation")
        self.az = pattern.az_grid[self.az_idx]
        self.el = pattern.el_grid[self.el_idx]
        if not (pattern.covers(self.freqs[0]) and pattern.covers(self.freqs[-1])):
            raise OutOfHull("calibration pattern does not cover the training band")
        a_u = pattern_at_frequencies(pattern, self.freqs)
        a_u = a_u[np.ix_(self.az_idx, self.el_idx)]
        self.a_u = a_u                                         # (N_az, N_el, M, K_u)
        n_az, n_el, m, k = a_u.shape
        self.a_conj = np.ascontiguousarray(a_u.conj().reshape(n_az, n_el, m * k))
        self.norm = np.sum(np.abs(a_u) ** 2, axis=(2, 3))      # (N_az, N_el)
        self.delay_grid = cfg.delay_grid
        self.levels = cfg.refinement_levels
        self.sweeps = cfg.doa_sweeps

    def _ratio(self, corr, norm):
        power = np.abs(corr) ** 2
        return np.divide(power, norm, out=np.zeros_like(power), where=norm > 0)

    def _delay_objective(self, x, i, j):
        z = np.einsum("mk,mk->k", self.a_u[i, j].conj(), x)
        norm = self.norm[i, j]
        df = self.train_grid.spacing

        def objective(taus):
            p = _kernels.trig_poly(z, df, taus)
            return self._ratio(p, norm)

        return objective

    def _angle_corr(self, x, tau):
        y = (x * np.exp(2j * np.pi * self.freqs * tau)[None, :]).reshape(-1)
        return self.a_conj @ y                                 # (N_az, N_el)

    def maximize(self, x, incumbent: MpcDoa | None = None) -> MpcDoa:
        if incumbent is None:
            # seed: delay from the pattern-free relaxation, then a joint angle scan
            tau, _ = _delay_search(_vss_objective(x, self.train_grid), self.delay_grid,
                                   self.levels, None)
            score = self._ratio(self._angle_corr(x, tau), self.norm)
            flat = int(np.argmax(score))
            i, j = divmod(flat, score.shape[1])
        else:
            i = _nearest_node(self.az, incumbent.phi, wrap=True)
            j = _nearest_node(self.el, incumbent.theta, wrap=False)
            tau = incumbent.tau
        for _ in range(self.sweeps):
            tau, _ = _delay_search(self._delay_objective(x, i, j), self.delay_grid,
                                   self.levels, tau)
            corr = self._angle_corr(x, tau)
            i = _argmax_keep(self._ratio(corr[:, j], self.norm[:, j]), i)
            j = _argmax_keep(self._ratio(corr[i, :], self.norm[i, :]), j)
        corr = self._angle_corr(x, tau)[i, j]
        norm = self.norm[i, j]
        alpha = corr / norm if norm > 0 else 0j
        return MpcDoa(complex(alpha), tau, float(self.az[i]), float(self.el[j]))

    def path_on_grid(self, p: MpcDoa) -> np.ndarray:
        i = _nearest_node(self.az, p.phi, wrap=True)
        j = _nearest_node(self.el, p.theta, wrap=False)
        return p.alpha * self.a_u[i, j] * np.exp(-2j * np.pi * self.freqs * p.tau)[None, :]


def _argmax_keep(values: np.ndarray, current: int) -> int:
    """First argmax, unless it is no better than `current`."""
    j = int(np.argmax(values))
    return j if values[j] > values[current] * (1 + _MARGIN) else current


def _node_indices(nodes: np.ndarray, wanted, what: str) -> np.ndarray:
    if wanted is None:
        return np.arange(nodes.size)
    wanted = np.asarray(wanted, dtype=float).reshape(-1)
    if wanted.size == 0:
        raise GridEmpty(f"{what} search grid is empty")
    idx = []
    for w in wanted:
        hit = np.flatnonzero(np.isclose(nodes, w, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise GridInvalid(f"{what} {w} is not a calibration node")
        idx.append(int(hit[0]))
    return np.array(idx, dtype=np.intp)


def _nearest_node(nodes: np.ndarray, value: float, wrap: bool) -> int:
    diff = nodes - value
    if wrap:
        diff = np.angle(np.exp(1j * diff))
    return int(np.argmin(np.abs(diff)))


def maximize_doa(x, pattern: ArrayPattern, cfg: SageConfig, train_grid: FrequencyGrid,
                 incumbent: MpcDoa | None = None) -> MpcDoa:
    """Maximization step of the DOA model.

    Coordinate searches over delay, azimuth and elevation (in that order,
    `cfg.doa_sweeps` times) maximize ``|<s, x>|^2 / ||s||^2`` where ``s`` is
    the stacked model vector of one path; the amplitude is the closed-form
    least-squares value ``<s, x> / ||s||^2``.
    """
    x = np.asarray(x, dtype=np.complex128)
    if cfg.delay_grid.size == 0:
        raise GridEmpty("delay grid is empty")
    return _DoaSearch(pattern, cfg, train_grid).maximize(x, incumbent)


# -- SAGE driver ------------------------------------------------------------

class _Runner:
    def __init__(self, h_u: ChannelMatrix, cfg: SageConfig, pattern: ArrayPattern | None):
        if h_u.K < 2:
            raise GridInvalid("training band needs at least two frequencies")
        cfg.check_delays(h_u.grid)
        if cfg.model is Model.DOA:
            if pattern is None:
                raise PatternMissing("the DOA model needs a calibration pattern")
            self.doa = _DoaSearch(pattern, cfg, h_u.grid)
        elif pattern is not None:
            raise PatternMissing("a calibration pattern is only used by the DOA model")
        self.h = h_u.data
        self.grid = h_u.grid
        self.freqs = h_u.grid.frequencies
        self.cfg = cfg

    def maximize(self, x, incumbent=None):
        if self.cfg.model is Model.VSS:
            return maximize_vss(x, self.cfg.delay_grid, self.grid,
                                self.cfg.refinement_levels, incumbent)
        return self.doa.maximize(x, incumbent)

    def on_grid(self, p) -> np.ndarray:
        if self.cfg.model is Model.VSS:
            return p.a_vec[:, None] * np.exp(-2j * np.pi * self.freqs * p.tau)[None, :]
        return self.doa.path_on_grid(p)

    def residual_energy(self, recon) -> float:
        r = self.h - recon.sum(axis=0)
        return float(np.vdot(r, r).real)

    def init(self):
        params, recon = [], []
        residual = self.h.copy()
        for _ in range(self.cfg.L):
            p = self.maximize(residual)
            c = self.on_grid(p)
            residual = residual - c
            params.append(p)
            recon.append(c)
        return params, np.array(recon)

    def cycle(self, params, recon):
        total = recon.sum(axis=0)
        for l in range(self.cfg.L):
            x = self.h - total + recon[l]
            p = self.maximize(x, params[l])
            c = self.on_grid(p)
            total = total + (c - recon[l])
            params[l] = p
            recon[l] = c


def sage_init(h_u: ChannelMatrix, cfg: SageConfig, pattern: ArrayPattern | None = None
              ) -> SageEstimate:
    """Initial estimate by successive cancellation, strongest path first."""
    run = _Runner(h_u, cfg, pattern)
    params, recon = run.init()
    return SageEstimate(cfg.model, tuple(params), (run.residual_energy(recon),), 0, False)


def sage_run(h_u: ChannelMatrix, cfg: SageConfig, pattern: ArrayPattern | None = None
             ) -> SageEstimate:
    """Initialize, then run iteration cycles until convergence or `cfg.max_cycles`.

    ``residual_energy_trace[0]`` is the residual after initialization and
    entry ``c`` the residual after cycle ``c``. The run has converged when
    the relative decrease over one cycle falls below `cfg.convergence_tol`.
    """
    run = _Runner(h_u, cfg, pattern)
    params, recon = run.init()
    trace = [run.residual_energy(recon)]
    converged = False
    cycles = 0
    while cycles < cfg.max_cycles:
        run.cycle(params, recon)
        cycles += 1
        trace.append(run.residual_energy(recon))
        prev, cur = trace[-2], trace[-1]
        if prev <= 0 or (prev - cur) < cfg.convergence_tol * prev:
            converged = True
            break
    return SageEstimate(cfg.model, tuple(params), tuple(trace), cycles, converged)


def expectation_step(h_u: ChannelMatrix, est: SageEstimate, path_index: int,
                     pattern: ArrayPattern | None = None) -> np.ndarray:
    """Training-band data with every path except `path_index` (1-based) cancelled."""
    if not 1 <= path_index <= est.L:
        raise IndexOutOfRange(f"path index {path_index} outside [1, {est.L}]")
    others = [p for i, p in enumerate(est.params, start=1) if i != path_index]
    if not others:
        return np.array(h_u.data)
    partial = SageEstimate(est.model, tuple(others))
    return h_u.data - reconstruct_many(partial, h_u.grid.frequencies, pattern)


# -- reconstruction ---------------------------------------------------------

def reconstruct_many(est: SageEstimate, freqs, pattern: ArrayPattern | None = None
                     ) -> np.ndarray:
    """Model channel at arbitrary frequencies, shape (M, len(freqs))."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if est.L == 0:
        raise ValueError("estimate has no paths")
    taus = np.array([p.tau for p in est.params])
    phase = np.exp(-2j * np.pi * np.outer(taus, freqs))         # (L, F)
    if est.model is Model.VSS:
        sig = np.stack([p.a_vec for p in est.params], axis=1)   # (M, L)
        return sig @ phase
    if pattern is None:
        raise PatternMissing("the DOA model needs a calibration pattern")
    resp = np.stack([pattern_lookup_many(pattern, p.phi, p.theta, freqs)
                     for p in est.params])                      # (L, M, F)
    alphas = np.array([p.alpha for p in est.params])
    return np.einsum("l,lmf,lf->mf", alphas, resp, phase)


def reconstruct(est: SageEstimate, f: float, pattern: ArrayPattern | None = None
                ) -> np.ndarray:
    """Model channel at a single frequency `f`, shape (M,)."""
    return reconstruct_many(est, [f], pattern)[:, 0]


# -- serialization ----------------------------------------------------------

def estimate_to_dict(est: SageEstimate) -> dict:
    if est.model is Model.VSS:
        paths = [{"a_re": p.a_vec.real.tolist(), "a_im": p.a_vec.imag.tolist(),
                  "tau_s": p.tau} for p in est.params]
    else:
        paths = [{"alpha_re": p.alpha.real, "alpha_im": p.alpha.imag, "tau_s": p.tau,
                  "phi_rad": p.phi, "theta_rad": p.theta} for p in est.params]
    doc = {"model": est.model.value, "L": est.L, "paths": paths,
           "residual_energy_trace": list(est.residual_energy_trace),
           "cycles_run": est.cycles_run, "converged": est.converged}
    if est.extra:
        doc["extra"] = est.extra
    return doc


def estimate_from_dict(doc: dict) -> SageEstimate:
    try:
        model = Model(doc["model"])
        if model is Model.VSS:
            params = [MpcVss(np.array(p["a_re"], float) + 1j * np.array(p["a_im"], float),
                             float(p["tau_s"])) for p in doc["paths"]]
        else:
            params = [MpcDoa(complex(float(p["alpha_re"]), float(p["alpha_im"])),
                             float(p["tau_s"]), float(p["phi_rad"]), float(p["theta_rad"]))
                      for p in doc["paths"]]
        if int(doc.get("L", len(params))) != len(params):
            raise ValueError("L does not match the number of paths")
        return SageEstimate(model, tuple(params),
                            tuple(float(v) for v in doc.get("residual_energy_trace", ())),
                            int(doc.get("cycles_run", 0)), bool(doc.get("converged", False)),
                            dict(doc.get("extra", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid estimate document: {exc}") from exc


def _dumps(doc) -> str:
    # repr-based float output is the shortest string that round-trips float64
    return json.dumps(doc, indent=2, allow_nan=True) + "\n"


def write_estimate(path, est: SageEstimate) -> None:
    atomic_write_text(path, _dumps(estimate_to_dict(est)))


def read_estimate(path) -> SageEstimate:
    return estimate_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
