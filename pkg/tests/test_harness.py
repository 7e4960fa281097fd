import json
import math

import numpy as np
import pytest

from chx.core import FrequencyGrid, Stage, write_chx
from chx.errors import ConfigInvalid, IoFailure, SingularGram
from chx.harness import (ExperimentConfig, UeSpec, emit_report, load_config, run_pipeline,
                         synthesize_ue, ue_seeds, worker_cap)
from chx.metrics import METRIC_COLUMNS
from chx.synthesis import MpcDoa, Scenario, write_scenario

SMALL_GRID = FrequencyGrid(3.4e9, 125e3, 961)     # 120 MHz, band of 281 in the middle


def small(**kw):
    base = dict(grid=SMALL_GRID, geometry="ula8", summary_offsets_hz=(35e6,))
    base.update(kw)
    return ExperimentConfig(**base)


def los_scenario(tmp_path, name="los", tau_index=64, ue_id="ue0"):
    # delay on the 4096-point grid of the training band, angles on calibration nodes
    tau = tau_index / (4096 * 125e3)
    sc = Scenario("oracle", (MpcDoa(1.0 + 0.5j, tau, np.deg2rad(18.0), 0.0),), "ula8", 0,
                  ue_id)
    path = tmp_path / f"{name}.json"
    write_scenario(path, sc)
    return path


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.grid.count == 2801
        band = cfg.band
        assert (band.offset, band.width) == (1261, 281)
        assert cfg.center_hz == 3.5e9

    def test_round_trip(self, tmp_path):
        cfg = small(ues=(UeSpec("a", preset="Olos", seed=4), UeSpec("b", preset="NlosRich")),
                    paths=(1, 3), models=("vss", "doa"), groups=(("a", "b"),), snr_db=10)
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()
        # the echo resolves a default training center
        assert again.train_center_hz == again.center_hz == cfg.center_hz

    @pytest.mark.parametrize("doc", [
        {"paths": [0]},
        {"models": []},
        {"models": ["music"]},
        {"seed": -1},
        {"bogus": 1},
        {"sage": {"cycles": 3}},
        {"train_width_hz": 1e9},
        {"train_center_hz": 1e9},
        {"ues": [{"preset": "Indoor"}]},
        {"ues": [{"preset": "Olos", "channel": "x.chx"}]},
        {"ues": [{"channel": "missing.chx"}]},
        {"ues": [{"preset": "Olos", "ue_id": "a"}], "groups": [["a", "b"]]},
        {"ues": [{"preset": "Olos", "ue_id": "a"}, {"preset": "Olos", "ue_id": "a"}]},
        {"geometry": "hexagon"},
        {"snr_db": math.inf},
        {"summary_offsets_hz": [1.0]},
    ])
    def test_invalid(self, doc):
        with pytest.raises(ConfigInvalid):
            ExperimentConfig.from_dict(doc)

    def test_count_expansion(self):
        cfg = ExperimentConfig.from_dict({"ues": [{"preset": "Olos", "count": 3},
                                                  {"preset": "NlosRich", "ue_id": "x"}]})
        assert [u.ue_id for u in cfg.ues] == ["ue0", "ue1", "ue2", "x"]
        assert cfg.groups_with_singles() == [("ue0",), ("ue1",), ("ue2",), ("x",)]

    def test_load_with_override(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "paths": 2}))
        cfg = load_config(tmp_path / "c.json", {"seed": 9})
        assert (cfg.seed, cfg.paths) == (9, (2,))
        (tmp_path / "bad.json").write_text("[1, 2]")
        with pytest.raises(ConfigInvalid):
            load_config(tmp_path / "bad.json")
        with pytest.raises(ConfigInvalid):
            load_config(tmp_path / "none.json")

    def test_scenario_ids_and_paths_relative_to_config(self, tmp_path):
        los_scenario(tmp_path, ue_id="roof")
        (tmp_path / "c.json").write_text(json.dumps({"geometry": "ula8",
                                                     "ues": [{"scenario": "los.json"}]}))
        cfg = load_config(tmp_path / "c.json")
        assert cfg.ues[0].ue_id == "roof"
        assert synthesize_ue(cfg, 0).scenario.ue_id == "roof"

    def test_seeds(self):
        cfg = small(ues=tuple(UeSpec(f"u{i}", preset="Olos") for i in range(4)), seed=5)
        seeds = ue_seeds(cfg)
        assert len(set(seeds)) == 4
        assert seeds[:2] == ue_seeds(small(ues=cfg.ues[:2], seed=5))

    def test_worker_cap(self, monkeypatch):
        monkeypatch.setenv("CHX_THREADS", "3")
        assert worker_cap() == 3
        monkeypatch.setenv("CHX_THREADS", "zero")
        with pytest.raises(ConfigInvalid):
            worker_cap()
        monkeypatch.setenv("CHX_THREADS", "0")
        with pytest.raises(ConfigInvalid):
            worker_cap()


class TestPipeline:
    def test_oracle_los_is_exact(self, tmp_path):
        path = los_scenario(tmp_path)
        cfg = small(ues=(UeSpec("ue0", scenario=str(path)),), models=("doa",),
                    truth_manifold="pattern")
        rep = run_pipeline(cfg)
        be = rep.runs["doa_L1"].metrics["be_db"]
        assert be.shape == (1, SMALL_GRID.count)
        assert np.all(np.abs(be) <= 0.05)
        assert np.all(rep.runs["doa_L1"].metrics["mse_db"] < -100)

    def test_oracle_los_vss_inside_band(self, tmp_path):
        # a fixed signature cannot follow beam squint, so only the band is exact
        cfg = small(ues=(UeSpec("ue0", scenario=str(los_scenario(tmp_path))),))
        rep = run_pipeline(cfg)
        be = rep.runs["vss_L1"].metrics["be_db"][0]
        assert np.all(np.abs(be[rep.band.start:rep.band.stop]) <= 0.05)
        assert np.all(be <= 0.0)

    def test_trace_axis_is_full_grid(self):
        rep = run_pipeline(small(ues=(UeSpec("a", preset="Olos"),), snr_db=20))
        rows = rep.rows("vss_L1")
        assert len(rows) == SMALL_GRID.count
        np.testing.assert_array_equal([r["f_Hz"] for r in rows], SMALL_GRID.frequencies)

    def test_repeat_is_byte_identical(self, tmp_path):
        cfg = small(ues=tuple(UeSpec(f"u{i}", preset="NlosRich") for i in range(3)),
                    groups=(("u0", "u1"),), paths=(2,), snr_db=15, seed=11)
        a = run_pipeline(cfg).csv_text("vss_L2")
        b = run_pipeline(cfg).csv_text("vss_L2")
        assert a == b

    def test_seed_changes_result(self):
        ues = (UeSpec("u", preset="Olos"),)
        a = run_pipeline(small(ues=ues, seed=1, snr_db=20)).csv_text("vss_L1")
        b = run_pipeline(small(ues=ues, seed=2, snr_db=20)).csv_text("vss_L1")
        assert a != b

    def test_empty_ue_list(self, tmp_path):
        rep = run_pipeline(small())
        emit_report(rep, tmp_path)
        assert (tmp_path / "metrics_vss_L1.csv").read_text() == ",".join(METRIC_COLUMNS) + "\n"
        echo = json.loads((tmp_path / "config.json").read_text())
        assert echo == small().to_dict()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["runs"][0]["bands"][0]["be_db"]["median"] is None

    def test_reingest_scenarios(self, tmp_path):
        cfg = small(ues=tuple(UeSpec(f"u{i}", preset="LosDominant") for i in range(3)),
                    snr_db=20, seed=21, groups=(("u1", "u2"),))
        rep = run_pipeline(cfg)
        emit_report(rep, tmp_path / "first")
        again = small(ues=tuple(UeSpec(f"u{i}", scenario=str(tmp_path / "first" / "scenarios"
                                                             / f"u{i}.json"))
                                for i in range(3)),
                      snr_db=20, seed=21, groups=(("u1", "u2"),))
        rep2 = run_pipeline(again)
        emit_report(rep2, tmp_path / "second")
        for name in ("metrics_vss_L1.csv", "summary.json"):
            assert (tmp_path / "first" / name).read_bytes() == \
                (tmp_path / "second" / name).read_bytes()

    def test_emitted_files(self, tmp_path):
        cfg = small(ues=(UeSpec("a", preset="Olos"), UeSpec("b", preset="LosDominant")),
                    models=("vss", "doa"), paths=(1,), snr_db=20)
        rep = run_pipeline(cfg)
        written = {p.relative_to(tmp_path).as_posix() for p in emit_report(rep, tmp_path)}
        assert {"config.json", "summary.json", "diagnostics.json", "metrics_vss_L1.csv",
                "metrics_doa_L1.csv", "estimates/a_vss_L1.json", "estimates/b_doa_L1.json",
                "scenarios/a.json"} <= written
        summary = json.loads((tmp_path / "summary.json").read_text())
        off = summary["runs"][0]["bands"][1]
        assert off["band"] == "offset_3.5e+07Hz"
        assert off["be_db"]["count"] == 4               # 2 UEs x both sides
        assert off["be_db_values"] == sorted(off["be_db_values"])
        assert "mean_linear_db" in off["be_db"] and off["be_db"]["mean_linear_db"] <= 0
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        assert diag["runs"]["doa_L1"]["a"]["cycles_run"] >= 1
        assert "total_s" in diag["timings_s"]

    def test_emit_unwritable(self, tmp_path):
        rep = run_pipeline(small())
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            emit_report(rep, blocker / "sub")

    def test_channel_input(self, tmp_path):
        truth = synthesize_ue(small(ues=(UeSpec("a", preset="Olos"),)), 0).truth
        write_chx(tmp_path / "h.chx", truth)
        cfg = small(ues=(UeSpec("site", channel=str(tmp_path / "h.chx")),))
        rep = run_pipeline(cfg)
        assert rep.scenarios == {"site": None}
        assert truth.stage is Stage.COMPENSATED

    def test_colocated_group_is_numerical_error(self, tmp_path):
        path = los_scenario(tmp_path)
        cfg = small(ues=(UeSpec("a", scenario=str(path)), UeSpec("b", scenario=str(path))),
                    groups=(("a", "b"),))
        with pytest.raises(SingularGram, match="group a\\+b"):
            run_pipeline(cfg)

    def test_group_scores_use_interference(self):
        ues = (UeSpec("a", preset="LosDominant"), UeSpec("b", preset="LosDominant"))
        single = run_pipeline(small(ues=ues, snr_db=30, seed=4))
        grouped = run_pipeline(small(ues=ues, snr_db=30, seed=4, groups=(("a", "b"),)))
        s1 = single.runs["vss_L1"].metrics["se_mr"]
        s2 = grouped.runs["vss_L1"].metrics["se_mr"]
        assert np.all(s2 <= s1 + 1e-12)
        np.testing.assert_array_equal(single.runs["vss_L1"].metrics["be_db"],
                                      grouped.runs["vss_L1"].metrics["be_db"])


@pytest.mark.slow
def test_extrapolation_is_worse_than_interpolation():
    # NlosRich: in-band MSE below the MSE at every frequency one band-width away
    cfg = ExperimentConfig(ues=tuple(UeSpec(f"u{i}", preset="NlosRich") for i in range(50)),
                           paths=(10,), snr_db=20.0, seed=3)
    rep = run_pipeline(cfg)
    m = rep.runs["vss_L10"].metrics["mse_db"]
    band = rep.band
    far = np.r_[0:band.start - band.width, band.stop - 1 + band.width:rep.grid.count]
    in_band = 10 * np.log10(np.mean(10 ** (m[:, band.start:band.stop] / 10), axis=1))
    assert np.mean(in_band <= m[:, far].min(axis=1)) >= 0.9


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="synthetic channels carry no model mismatch for "
                                       "extra paths to overfit; see the decision ledger")
def test_single_path_beats_ten_paths_on_los():
    cfg = ExperimentConfig(ues=tuple(UeSpec(f"u{i}", preset="LosDominant") for i in range(20)),
                           paths=(1, 10), snr_db=20.0, seed=0)
    rep = run_pipeline(cfg)
    idx = rep.offset_indices(105e6)
    med = {L: np.median(rep.runs[f"vss_L{L}"].metrics["be_db"][:, idx]) for L in (1, 10)}
    assert med[1] >= med[10]
