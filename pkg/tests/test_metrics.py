import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from chx.core import ChannelMatrix, FrequencyGrid, Stage
from chx.errors import DimensionMismatch, GridMismatch, SingularGram, ZeroEstimate, ZeroVector
from chx.metrics import (METRIC_COLUMNS, LinkBudget, MultiUserChannel, PrecoderSet, Scheme,
                         beamforming_efficiency_db, beamforming_efficiency_db_columns,
                         beamforming_gains, beamforming_gains_columns, format_float,
                         metric_rows_to_csv, mse_db, mse_db_columns, precode, precode_matrix,
                         sinr, spectral_efficiency, to_db, write_metric_csv)

from conftest import crandn


def loop_inner(a, b):
    """a^H b by scalar loop."""
    acc = 0j
    for x, y in zip(a, b):
        acc += x.conjugate() * y
    return acc


def loop_norm2(a):
    return sum(abs(x) ** 2 for x in a)


def loop_t(a, b):
    """a^T b by scalar loop."""
    acc = 0j
    for x, y in zip(a, b):
        acc += x * y
    return acc


complex_vec = st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False,
                                          allow_infinity=False), min_size=1, max_size=16)


class TestMse:
    def test_exact_match(self, rng):
        h = crandn(rng, 8)
        assert mse_db(h, h) == -math.inf

    def test_unit_power_miss(self, rng):
        h = crandn(rng, 16)
        h *= math.sqrt(16 / np.vdot(h, h).real)
        assert mse_db(h, np.zeros(16)) == pytest.approx(0.0, abs=1e-12)

    def test_loop_oracle(self, rng):
        h, g = crandn(rng, 64), crandn(rng, 64)
        oracle = sum(abs(x - y) ** 2 for x, y in zip(h, g)) / 64
        assert 10 ** (mse_db(h, g) / 10) == pytest.approx(oracle, rel=1e-12)

    def test_columns_agree(self, rng):
        h, g = crandn(rng, 5, 7), crandn(rng, 5, 7)
        np.testing.assert_allclose(mse_db_columns(h, g), [mse_db(h[:, k], g[:, k])
                                                           for k in range(7)], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mse_db(np.ones(3), np.ones(4))


class TestGains:
    def test_perfect_csi(self, rng):
        h = crandn(rng, 8)
        meas, est, _ = beamforming_gains(h, h)
        assert est == pytest.approx(meas, rel=1e-14)

    def test_orthogonal(self):
        meas, est, uni = beamforming_gains([1, 1j, 0], [1j, 1, 0])
        assert est == 0.0 and meas == 2.0

    def test_scalar_oracle(self, rng):
        h, g = list(crandn(rng, 4)), list(crandn(rng, 4))
        meas, est, uni = beamforming_gains(h, g)
        assert meas == pytest.approx(loop_norm2(h), rel=1e-14)
        assert est == pytest.approx(abs(loop_inner(g, h)) ** 2 / loop_norm2(g), rel=1e-12)
        assert uni == pytest.approx(loop_norm2(h) / 4, rel=1e-14)

    def test_uniform_is_meas_over_m(self, rng):
        for m in (1, 3, 64):
            meas, _, uni = beamforming_gains(crandn(rng, m), crandn(rng, m))
            assert uni * m == meas

    def test_zero_estimate(self, rng):
        with pytest.raises(ZeroEstimate):
            beamforming_gains(crandn(rng, 4), np.zeros(4))
        with pytest.raises(ZeroVector):
            beamforming_gains_columns(crandn(rng, 4, 2), np.zeros((4, 2)))

    def test_columns_agree(self, rng):
        h, g = crandn(rng, 6, 5), crandn(rng, 6, 5)
        cols = beamforming_gains_columns(h, g)
        for k in range(5):
            np.testing.assert_allclose([c[k] for c in cols], beamforming_gains(h[:, k], g[:, k]),
                                       rtol=1e-12)


class TestEfficiency:
    @pytest.mark.parametrize("c", [1.0, -2.5, 1j, 3e-8 - 4e5j])
    def test_scale_invariance(self, rng, c):
        h = crandn(rng, 32)
        assert abs(beamforming_efficiency_db(h, c * h)) < 1e-9

    def test_orthogonal(self):
        assert beamforming_efficiency_db([1, 0], [0, 1]) == -math.inf

    def test_uniform_weights(self, rng):
        h = crandn(rng, 64)
        g = np.ones(64)
        _, est, _ = beamforming_gains(h, g)
        meas = np.vdot(h, h).real
        assert beamforming_efficiency_db(h, g) == pytest.approx(10 * math.log10(est / meas),
                                                                rel=1e-12)

    def test_zero(self, rng):
        with pytest.raises(ZeroVector):
            beamforming_efficiency_db(np.zeros(3), crandn(rng, 3))

    @given(complex_vec, st.data())
    def test_never_above_zero(self, h, data):
        g = data.draw(st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False,
                                                  allow_infinity=False),
                               min_size=len(h), max_size=len(h)))
        assume(loop_norm2(h) > 1e-100 and loop_norm2(g) > 1e-100)
        assert beamforming_efficiency_db(h, g) <= 0.0

    @given(complex_vec, st.complex_numbers(min_magnitude=1e-6, max_magnitude=1e6,
                                           allow_nan=False, allow_infinity=False))
    def test_proportional_is_zero(self, h, c):
        assume(loop_norm2(h) > 1e-100)
        assert beamforming_efficiency_db(h, c * np.asarray(h)) > -1e-9

    def test_columns_agree(self, rng):
        h, g = crandn(rng, 4, 6), crandn(rng, 4, 6)
        np.testing.assert_allclose(beamforming_efficiency_db_columns(h, g),
                                   [beamforming_efficiency_db(h[:, k], g[:, k])
                                    for k in range(6)], rtol=1e-12)


class TestPrecode:
    def test_single_user(self, rng):
        h = crandn(rng, 8, 1)
        mr = precode_matrix(h, "MR")
        zf = precode_matrix(h, "ZF")
        assert abs(abs(np.vdot(mr[:, 0], zf[:, 0])) - 1) < 1e-12

    def test_orthogonal_users(self, rng):
        q, _ = np.linalg.qr(crandn(rng, 8, 3))
        h = q * np.array([1.0, 2.0, 0.5])
        mr, zf = precode_matrix(h, "MR"), precode_matrix(h, "ZF")
        for n in range(3):
            assert abs(abs(np.vdot(mr[:, n], zf[:, n])) - 1) < 1e-12

    def test_zf_null(self, rng):
        for _ in range(20):
            h = crandn(rng, 8, 2)
            g = precode_matrix(h, Scheme.ZF)
            assert abs(loop_t(h[:, 0], g[:, 1])) < 1e-10
            assert abs(loop_t(h[:, 1], g[:, 0])) < 1e-10

    def test_zf_leakage_bound(self, rng):
        for _ in range(50):
            h = crandn(rng, 16, 4)
            leak = np.abs(h.T @ precode_matrix(h, "ZF"))
            np.fill_diagonal(leak, 0)
            assert np.all(leak < 1e-10 * np.linalg.norm(h, axis=0)[:, None])

    def test_unit_norm(self, rng):
        for scheme in Scheme:
            p = precode(crandn(rng, 8, 3), scheme)
            np.testing.assert_allclose(np.linalg.norm(p.vectors, axis=0), 1.0, atol=1e-12)
            assert p.scheme is scheme

    def test_duplicate_users(self, rng):
        h = crandn(rng, 8, 1)
        with pytest.raises(SingularGram):
            precode_matrix(np.hstack([h, h]), "ZF")
        with pytest.raises(SingularGram):
            precode_matrix(np.hstack([h, h * (1 + 1e-9)]), "ZF", cond_cap=1e6)
        # MR has no Gram matrix to invert
        precode_matrix(np.hstack([h, h]), "MR")

    def test_stack_matches_loop(self, rng):
        h = crandn(rng, 5, 6, 2)
        stack = precode_matrix(h, "ZF")
        for k in range(5):
            np.testing.assert_allclose(stack[k], precode_matrix(h[k], "ZF"), rtol=1e-12)

    def test_multiuser_channel(self, rng):
        grid = FrequencyGrid(1e9, 1e6, 4)
        chans = [ChannelMatrix(crandn(rng, 3, 4), grid, Stage.NORMALIZED) for _ in range(2)]
        mu = MultiUserChannel(chans)
        assert (mu.N, mu.M) == (2, 3)
        np.testing.assert_array_equal(mu.at(2)[:, 1], chans[1].data[:, 2])
        p = precode(mu, "MR", k=2)
        np.testing.assert_allclose(p.vectors[:, 0],
                                   np.conj(chans[0].data[:, 2]) / np.linalg.norm(chans[0].data[:, 2]))
        with pytest.raises(GridMismatch):
            MultiUserChannel([chans[0], ChannelMatrix(chans[1].data, FrequencyGrid(2e9, 1e6, 4),
                                                      Stage.NORMALIZED)])
        with pytest.raises(DimensionMismatch):
            MultiUserChannel([])

    def test_precoder_set_norms(self):
        with pytest.raises(ValueError):
            PrecoderSet(np.ones((2, 1)), "MR")


class TestSinr:
    def test_single_user(self, rng):
        h = crandn(rng, 8)
        g = crandn(rng, 8)
        g /= np.linalg.norm(g)
        lb = LinkBudget(20.0)
        assert sinr(h, g[:, None], lb)[0] == pytest.approx(100 * abs(loop_t(h, g)) ** 2,
                                                           rel=1e-12)

    def test_perfect_csi_zf(self, rng):
        h = crandn(rng, 8, 2)
        p = precode(h, "ZF")
        lb = LinkBudget(30.0)
        s = sinr(h, p, lb)
        for n in range(2):
            assert s[n] == pytest.approx(lb.rho * abs(loop_t(h[:, n], p.vectors[:, n])) ** 2,
                                         rel=1e-9)

    def test_two_user_expansion(self, rng):
        h = crandn(rng, 8, 2)
        h_est = h + 0.3 * crandn(rng, 8, 2)
        lb = LinkBudget(10.0)
        for scheme in Scheme:
            g = precode_matrix(h_est, scheme)
            got = sinr(h, g, lb)
            rho = 10.0
            for n in range(2):
                sig = abs(loop_t(h[:, n], g[:, n])) ** 2 * rho
                intf = abs(loop_t(h[:, n], g[:, 1 - n])) ** 2 * rho
                assert got[n] == pytest.approx(sig / (intf + 1.0), rel=1e-12)

    def test_high_snr_interference_does_not_cancel(self, rng):
        h = crandn(rng, 64, 2)
        p = precode(h, "ZF")
        s = sinr(h, p, LinkBudget(100.0))
        assert np.all(s > 0) and np.all(np.isfinite(s))

    def test_shape_check(self, rng):
        with pytest.raises(DimensionMismatch):
            sinr(crandn(rng, 4, 2), precode_matrix(crandn(rng, 4, 3), "MR"), LinkBudget(0))

    def test_link_budget(self):
        assert LinkBudget(100).rho == 1e10
        with pytest.raises(ValueError):
            LinkBudget(math.inf)


class TestSpectralEfficiency:
    def test_values(self):
        assert spectral_efficiency(0.0) == 0.0
        assert spectral_efficiency(1.0) == 1.0
        assert spectral_efficiency(1e10) == pytest.approx(33.22, abs=5e-3)
        assert spectral_efficiency(1e10) == pytest.approx(math.log2(1 + 1e10), rel=1e-15)

    def test_array_and_negative(self):
        np.testing.assert_allclose(spectral_efficiency([0, 3, 7]), [0, 2, 3])
        with pytest.raises(ValueError):
            spectral_efficiency(-1e-3)

    def test_perfect_csi_ceiling(self, rng):
        m = 64
        h = np.exp(2j * np.pi * rng.random(m))        # unit gain per antenna
        s = sinr(h, precode_matrix(h[:, None], "MR"), LinkBudget(100))[0]
        assert spectral_efficiency(s) == pytest.approx(math.log2(1 + 1e10 * m), rel=1e-9)


class TestCsv:
    def test_format_float(self):
        assert format_float(-math.inf) == "-inf"
        assert format_float(0.1) == "0.1"
        x = 1 / 3
        assert float(format_float(x)) == x
        assert format_float(np.float64(2.5)) == "2.5"

    def test_to_db(self):
        assert to_db(0.0) == -math.inf
        assert to_db(100.0) == 20.0
        np.testing.assert_array_equal(to_db(np.array([1.0, 0.0])), [0.0, -math.inf])

    def test_rows(self, tmp_path):
        row = dict.fromkeys(METRIC_COLUMNS, 1.5)
        row.update(f_Hz=3.5e9, ue_id="ue0", mse_db=-math.inf)
        text = metric_rows_to_csv([row])
        lines = text.splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert lines[1].split(",")[:4] == ["3500000000.0", "ue0", "-inf", "1.5"]
        write_metric_csv(tmp_path / "m.csv", [row])
        assert (tmp_path / "m.csv").read_text() == text
        assert metric_rows_to_csv([]) == ",".join(METRIC_COLUMNS) + "\n"
