import json
import subprocess
import sys

import numpy as np
import pytest

from chx.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, main
from chx.core import Stage, read_chx
from chx.metrics import METRIC_COLUMNS
from chx.sage import read_estimate
from chx.synthesis import scenario_from_dict, write_scenario

GRID = {"f_start_hz": 3.4e9, "spacing_hz": 125e3, "count": 961}


def write_config(tmp_path, **doc):
    base = {"grid": GRID, "geometry": "ula8", "summary_offsets_hz": [35e6]}
    base.update(doc)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(base))
    return path


def test_pipeline(tmp_path):
    cfg = write_config(tmp_path, ues=[{"preset": "LosDominant", "count": 2}], snr_db=20,
                       out="run", groups=[["ue0", "ue1"]])
    assert main(["pipeline", "--config", str(cfg)]) == 0
    out = tmp_path / "run"                 # relative to the config file
    lines = (out / "metrics_vss_L1.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 1 + 2 * GRID["count"]
    assert json.loads((out / "config.json").read_text())["groups"] == [["ue0", "ue1"]]


def test_staged_commands_match_pipeline(tmp_path):
    cfg = write_config(tmp_path, ues=[{"preset": "Olos", "ue_id": "a"}], snr_db=20)
    syn, est, ext, ev, pipe = (tmp_path / d for d in ("syn", "est", "ext", "ev", "pipe"))
    assert main(["synth", "--config", str(cfg), "--out", str(syn)]) == 0
    measured = syn / "channels" / "a_measured.chx"
    assert read_chx(measured).stage is Stage.COMPENSATED
    assert main(["estimate", "--config", str(cfg), "--out", str(est),
                 "--channel", str(measured)]) == 0
    e = read_estimate(est / "estimate_vss_L1.json")
    assert e.extra["band_width"] == 281 and e.extra["mu"] > 0
    assert main(["extrapolate", "--config", str(cfg), "--out", str(ext),
                 "--estimate", str(est / "estimate_vss_L1.json")]) == 0
    recon = read_chx(ext / "reconstructed_vss_L1.chx")
    assert recon.stage is Stage.NORMALIZED and recon.K == GRID["count"]
    assert main(["evaluate", "--config", str(cfg), "--out", str(ev),
                 "--truth", str(syn / "channels" / "a_truth.chx"),
                 "--reconstructed", str(ext / "reconstructed_vss_L1.chx"),
                 "--estimate", str(est / "estimate_vss_L1.json"), "--ue-id", "a"]) == 0
    assert main(["pipeline", "--config", str(cfg), "--out", str(pipe)]) == 0
    staged = np.genfromtxt(ev / "metrics.csv", delimiter=",", names=True, dtype=None,
                           encoding="utf-8")
    whole = np.genfromtxt(pipe / "metrics_vss_L1.csv", delimiter=",", names=True, dtype=None,
                          encoding="utf-8")
    for col in ("mse_db", "be_db", "se_mr", "se_zf"):
        np.testing.assert_allclose(staged[col], whole[col], rtol=1e-9, atol=1e-12)


def test_doa_estimate_with_synthesized_calibration(tmp_path):
    cfg = write_config(tmp_path, ues=[{"preset": "LosDominant", "ue_id": "a"}])
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert main(["estimate", "--config", str(cfg), "--out", str(tmp_path / "e"),
                 "--model", "doa", "--channel",
                 str(tmp_path / "s" / "channels" / "a_measured.chx")]) == 0
    assert main(["extrapolate", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--estimate", str(tmp_path / "e" / "estimate_doa_L1.json")]) == 0


def test_config_wins_over_flags_but_not_seed(tmp_path):
    cfg = write_config(tmp_path, ues=[{"preset": "Olos"}], paths=[2], seed=1)
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--paths", "5", "--seed", "7"]) == 0
    echo = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echo["paths"] == [2] and echo["seed"] == 7
    assert (tmp_path / "o" / "metrics_vss_L2.csv").exists()


def test_flags_alone(tmp_path):
    assert main(["pipeline", "--preset", "Olos", "--ues", "2", "--geometry", "single",
                 "--paths", "2", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics_vss_L2.csv").exists()


@pytest.mark.parametrize("argv, code", [
    (["pipeline", "--config", "does-not-exist.json"], EXIT_CONFIG),
    (["pipeline", "--preset", "Olos", "--paths", "0", "--out", "x"], EXIT_CONFIG),
    (["pipeline", "--preset", "Olos"], EXIT_CONFIG),                         # no --out
    (["estimate", "--channel", "missing.chx", "--out", "x"], EXIT_IO),
])
def test_exit_codes(tmp_path, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_bad_channel_file_is_io_error(tmp_path):
    (tmp_path / "h.chx").write_bytes(b"not a channel")
    assert main(["estimate", "--channel", str(tmp_path / "h.chx"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO


def test_singular_group_is_numerical_error(tmp_path):
    sc = {"name": "s", "geometry_preset": "ula8", "seed": 0, "ue_id": "a",
          "paths": [{"alpha_re": 1.0, "alpha_im": 0.0, "tau_s": 1e-7, "phi_rad": 0.5,
                     "theta_rad": 0.0}]}
    write_scenario(tmp_path / "a.json", scenario_from_dict(sc))
    cfg = write_config(tmp_path, ues=[{"scenario": "a.json", "ue_id": "a"},
                                      {"scenario": "a.json", "ue_id": "b"}],
                       groups=[["a", "b"]], out="o")
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_NUMERICAL


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "chx.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "pipeline" in r.stdout
    r = subprocess.run([sys.executable, "-m", "chx.cli", "pipeline", "--config",
                        str(tmp_path / "nope.json")], capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG and "error" in r.stderr
