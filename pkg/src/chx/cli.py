"""
Command-line entry point ``chx``.

Sub-commands::

    chx synth        planted scenarios -> scenario JSON + CHX1 channels
    chx estimate     CHX1 channel -> SAGE estimate JSON (training band only)
    chx extrapolate  estimate JSON -> CHX1 channel on the full grid
    chx evaluate     truth + reconstruction -> metric CSV
    chx pipeline     the whole loop from a config file

Values in a ``--config`` file win over command-line flags, except ``--seed``.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from ._io import atomic_write_text
from .array import read_chp
from .core import (ChannelMatrix, FrequencyGrid, Stage, normalize, read_chx,
                   select_training_band, write_chx)
from .errors import ChxError, ConfigInvalid, FormatError, NumericalError, annotate
from .harness import (ExperimentConfig, calibration_pattern, emit_report, run_pipeline,
                      synthesize_ue, ue_seeds)
from .metrics import (LinkBudget, beamforming_efficiency_db_columns,
                      beamforming_gains_columns, mse_db_columns, precode_matrix, sinr,
                      spectral_efficiency, to_db, write_metric_csv)
from .sage import (Model, SageConfig, read_estimate, reconstruct_many, sage_run,
                   write_estimate)
from .synthesis import write_scenario

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--model", choices=[m.value for m in Model])
    p.add_argument("--paths", type=int, metavar="L", help="number of paths")
    p.add_argument("--train-center-hz", type=float)
    p.add_argument("--train-width-hz", type=float)
    p.add_argument("--out", type=Path, help="output directory")


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=["LosDominant", "Olos", "NlosRich"])
    p.add_argument("--ues", type=int, default=1, help="number of preset UEs")
    p.add_argument("--geometry", help="array preset, e.g. cylinder64, ula8, single")
    p.add_argument("--snr-db", type=float, help="sample SNR of the measurement")
    p.add_argument("--tx-snr-db", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chx", description=__doc__.splitlines()[1])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize scenarios and channels")
    _common(p)
    _scenario_flags(p)

    p = sub.add_parser("estimate", help="estimate paths on the training band")
    _common(p)
    p.add_argument("--channel", type=Path, required=True, help="CHX1 measured channel")
    p.add_argument("--pattern", type=Path, help="CHP1 calibration pattern (DOA model)")
    p.add_argument("--geometry", help="array preset used to synthesize a calibration")

    p = sub.add_parser("extrapolate", help="evaluate an estimate on a full grid")
    _common(p)
    p.add_argument("--estimate", type=Path, required=True)
    p.add_argument("--channel", type=Path, help="take the output grid from this file")
    p.add_argument("--pattern", type=Path)
    p.add_argument("--geometry")

    p = sub.add_parser("evaluate", help="score a reconstruction against the truth")
    _common(p)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--reconstructed", type=Path, required=True)
    p.add_argument("--estimate", type=Path, help="estimate JSON holding the scale mu")
    p.add_argument("--ue-id", default="ue0")
    p.add_argument("--tx-snr-db", type=float)

    p = sub.add_parser("pipeline", help="run a full experiment")
    _common(p)
    _scenario_flags(p)
    return ap


def _flag_doc(args) -> dict:
    doc = {}
    if args.model:
        doc["models"] = [args.model]
    if args.paths is not None:
        doc["paths"] = [args.paths]
    for key in ("train_center_hz", "train_width_hz", "snr_db", "tx_snr_db", "geometry"):
        if getattr(args, key, None) is not None:
            doc[key] = getattr(args, key)
    if args.out is not None:
        doc["out"] = str(args.out)
    if getattr(args, "preset", None):
        doc["ues"] = [{"preset": args.preset, "count": args.ues}]
    return doc


def load_cli_config(args) -> ExperimentConfig:
    """Flags, overlaid by the config file, overlaid by ``--seed``."""
    doc = _flag_doc(args)
    base = Path.cwd()
    if args.config is not None:
        try:
            file_doc = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_doc, dict):
            raise ConfigInvalid(f"{args.config} must contain a JSON object")
        base = args.config.parent
        if isinstance(file_doc.get("out"), str):
            file_doc["out"] = str(base / file_doc["out"])
        doc.update(file_doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    return ExperimentConfig.from_dict(doc, base_dir=base)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if cfg.out is None:
        raise ConfigInvalid("no output directory: pass --out or set 'out' in the config")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pattern_for(args, cfg: ExperimentConfig):
    if args.pattern is not None:
        return read_chp(args.pattern)
    return calibration_pattern(cfg)


def cmd_synth(args) -> None:
    cfg = load_cli_config(args)
    out = _out_dir(args, cfg)
    seeds = ue_seeds(cfg)
    (out / "scenarios").mkdir(exist_ok=True)
    (out / "channels").mkdir(exist_ok=True)
    for i, spec in enumerate(cfg.ues):
        ue = synthesize_ue(cfg, i, seeds)
        if ue.scenario is not None:
            write_scenario(out / "scenarios" / f"{spec.ue_id}.json", ue.scenario)
        write_chx(out / "channels" / f"{spec.ue_id}_truth.chx", ue.truth)
        write_chx(out / "channels" / f"{spec.ue_id}_measured.chx", ue.measured)
    atomic_write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=2) + "\n")


def cmd_estimate(args) -> None:
    cfg = load_cli_config(args)
    out = _out_dir(args, cfg)
    h = read_chx(args.channel)
    if h.stage is Stage.RAW:
        raise ConfigInvalid(f"{args.channel} is raw; compensate the RF response first")
    cfg = _with_grid(cfg, h.grid)
    h_n, mu = normalize(h)
    band = cfg.band
    h_u = select_training_band(h_n, band)
    pattern = _pattern_for(args, cfg) if Model.DOA in cfg.models else None
    for model in cfg.models:
        for L in cfg.paths:
            scfg = SageConfig.default(model, L, h_u.grid, cfg.sage.n_delays,
                                      max_cycles=cfg.sage.max_cycles,
                                      convergence_tol=cfg.sage.tol,
                                      refinement_levels=cfg.sage.refinement_levels,
                                      doa_sweeps=cfg.sage.doa_sweeps)
            try:
                est = sage_run(h_u, scfg, pattern if model is Model.DOA else None)
            except Exception as exc:
                raise annotate(exc, f"estimate {model.value} L={L}")
            est = dataclasses.replace(est, extra={
                "mu": mu, "band_offset": band.offset, "band_width": band.width,
                "channel": str(args.channel),
                "grid": {"f_start_hz": h.grid.f_start, "spacing_hz": h.grid.spacing,
                         "count": h.grid.count}})
            write_estimate(out / f"estimate_{model.value}_L{L}.json", est)


def _with_grid(cfg: ExperimentConfig, grid: FrequencyGrid) -> ExperimentConfig:
    doc = cfg.to_dict()
    doc["grid"] = {"f_start_hz": grid.f_start, "spacing_hz": grid.spacing,
                   "count": grid.count}
    if cfg.train_center_hz is None:
        doc.pop("train_center_hz")
    return ExperimentConfig.from_dict(doc, base_dir=cfg.base_dir)


def cmd_extrapolate(args) -> None:
    cfg = load_cli_config(args)
    out = _out_dir(args, cfg)
    est = read_estimate(args.estimate)
    if args.channel is not None:
        grid = read_chx(args.channel).grid
    elif "grid" in est.extra:
        g = est.extra["grid"]
        grid = FrequencyGrid(g["f_start_hz"], g["spacing_hz"], g["count"])
    else:
        grid = cfg.grid
    pattern = None
    if est.model is Model.DOA:
        pattern = _pattern_for(args, _with_grid(cfg, grid))
    try:
        recon = reconstruct_many(est, grid.frequencies, pattern)
    except Exception as exc:
        raise annotate(exc, "extrapolate")
    stem = args.estimate.stem.replace("estimate", "reconstructed", 1)
    write_chx(out / f"{stem}.chx", ChannelMatrix(recon, grid, Stage.NORMALIZED))


def cmd_evaluate(args) -> None:
    cfg = load_cli_config(args)
    out = _out_dir(args, cfg)
    truth = read_chx(args.truth)
    recon = read_chx(args.reconstructed)
    if truth.grid != recon.grid or truth.M != recon.M:
        raise ConfigInvalid("truth and reconstruction are on different grids or arrays")
    if truth.stage is Stage.NORMALIZED:
        h = truth.data
    elif args.estimate is not None and "mu" in read_estimate(args.estimate).extra:
        h = truth.data / float(read_estimate(args.estimate).extra["mu"])
    else:
        h = normalize(truth)[0].data
    g = recon.data
    tx = args.tx_snr_db if args.tx_snr_db is not None else cfg.tx_snr_db
    lb = LinkBudget(tx)
    meas, bg_est, uni = beamforming_gains_columns(h, g)
    cols = {"mse_db": mse_db_columns(h, g), "be_db": beamforming_efficiency_db_columns(h, g),
            "bg_meas": meas, "bg_est": bg_est, "bg_uni": uni}
    for scheme in ("MR", "ZF"):
        s = sinr(h.T[:, :, None], precode_matrix(g.T[:, :, None], scheme), lb)[:, 0]
        cols[f"sinr_db_{scheme.lower()}"] = to_db(s)
        cols[f"se_{scheme.lower()}"] = spectral_efficiency(s)
    freqs = truth.grid.frequencies
    rows = [{"f_Hz": freqs[k], "ue_id": args.ue_id, **{c: v[k] for c, v in cols.items()}}
            for k in range(truth.K)]
    write_metric_csv(out / "metrics.csv", rows)


def cmd_pipeline(args) -> None:
    cfg = load_cli_config(args)
    out = _out_dir(args, cfg)
    rep = run_pipeline(cfg)
    emit_report(rep, out)


COMMANDS = {"synth": cmd_synth, "estimate": cmd_estimate, "extrapolate": cmd_extrapolate,
            "evaluate": cmd_evaluate, "pipeline": cmd_pipeline}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ChxError, ValueError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ChxError, ValueError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"chx {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
