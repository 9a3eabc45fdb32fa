import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import ser_16qam
from tosc_privacy.channel import (
    NOISELESS,
    ChannelConfig,
    SymbolBlock,
    add_awgn,
    awgn,
    denormalize,
    noise_variance,
    normalize_power,
    power_normalize,
    qam_constellation,
    qam_demodulate,
    qam_modulate,
)
from tosc_privacy.errors import DegenerateInputError, ValidationError


class TestPowerNormalize:
    def test_constant_vector(self):
        block = power_normalize(np.full(128, 3.7))
        assert len(block) == 64
        np.testing.assert_allclose(np.abs(block.symbols) ** 2, 1.0, rtol=1e-12)

    def test_impulse(self):
        x = np.zeros(128)
        x[0] = 1.0
        block = power_normalize(x)
        # scale = sqrt(d/2)/||x|| = 8, so the first symbol carries |8|^2 = 64
        assert np.abs(block.symbols[0]) ** 2 == pytest.approx(64.0)
        assert np.all(block.symbols[1:] == 0)
        assert block.power == pytest.approx(1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            power_normalize(np.zeros(128))

    def test_odd_length_rejected(self):
        with pytest.raises(ValidationError):
            power_normalize(np.ones(5))

    def test_batch_rows_independent(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 16))
        block = power_normalize(x)
        for i in range(7):
            np.testing.assert_allclose(block.symbols[i], power_normalize(x[i]).symbols)
        np.testing.assert_allclose(block.power, 1.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.sampled_from([2, 8, 64, 128]),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_roundtrip_identity(self, x):
        if np.linalg.norm(x) < 1e-6:
            return
        block = power_normalize(x)
        assert abs(block.power - 1.0) < 1e-6
        back = denormalize(block)
        np.testing.assert_allclose(back, x, rtol=1e-6, atol=1e-9 * np.abs(x).max())

    def test_torch_path_matches_numpy(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 128))
        t = normalize_power(torch.from_numpy(x)).numpy()
        ref = power_normalize(x)
        np.testing.assert_allclose(t[:, 0::2] + 1j * t[:, 1::2], ref.symbols, rtol=1e-12)

    def test_torch_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            normalize_power(torch.zeros(2, 8))


class TestAWGN:
    def test_noiseless_sentinel_bit_exact(self):
        block = power_normalize(np.random.default_rng(0).normal(size=128))
        out = awgn(block, NOISELESS, seed=3)
        assert np.array_equal(out.symbols, block.symbols)

    def test_variance_formula_12db(self):
        assert noise_variance(12) == pytest.approx(10 ** -1.2)
        assert noise_variance(12) == pytest.approx(0.0631, abs=1e-4)

    def test_empirical_power_0db(self):
        n = 10**6
        block = SymbolBlock(np.zeros(n, dtype=complex), np.asarray(1.0))
        out = awgn(block, 0.0, seed=11)
        assert np.mean(np.abs(out.symbols) ** 2) == pytest.approx(1.0, rel=0.01)

    def test_noise_split_equally(self):
        block = SymbolBlock(np.zeros(10**6, dtype=complex), np.asarray(1.0))
        s = awgn(block, 0.0, seed=2).symbols
        assert np.var(s.real) == pytest.approx(0.5, rel=0.01)
        assert np.var(s.imag) == pytest.approx(0.5, rel=0.01)
        assert abs(np.mean(s.real * s.imag)) < 0.005

    def test_deterministic_under_seed(self):
        block = power_normalize(np.arange(1.0, 129.0))
        a, b = awgn(block, 8.0, seed=5), awgn(block, 8.0, seed=5)
        assert np.array_equal(a.symbols, b.symbols)

    def test_different_seeds_same_statistics(self):
        block = SymbolBlock(np.zeros(200_000, dtype=complex), np.asarray(1.0))
        a = awgn(block, 4.0, seed=1).symbols
        b = awgn(block, 4.0, seed=2).symbols
        assert not np.array_equal(a, b)
        pa, pb = np.mean(np.abs(a) ** 2), np.mean(np.abs(b) ** 2)
        assert pa == pytest.approx(pb, rel=0.02)
        assert pa == pytest.approx(noise_variance(4.0), rel=0.02)

    def test_torch_awgn_power(self):
        g = torch.Generator().manual_seed(0)
        x = torch.zeros(1000, 1000, dtype=torch.float64)
        y = add_awgn(x, 4.0, g)
        # per complex symbol = two real coordinates
        assert (y ** 2).mean().item() * 2 == pytest.approx(noise_variance(4.0), rel=0.01)
        assert add_awgn(x, NOISELESS) is x


class TestQAM:
    @pytest.mark.parametrize("M", [4, 16, 64])
    def test_unit_average_energy(self, M):
        c = qam_constellation(M)
        assert len(np.unique(np.round(c, 12))) == M
        assert np.mean(np.abs(c) ** 2) == pytest.approx(1.0)

    def test_16qam_grid_scaled_by_sqrt10(self):
        c = qam_constellation(16) * math.sqrt(10)
        assert sorted(set(np.round(c.real).astype(int))) == [-3, -1, 1, 3]
        assert sorted(set(np.round(c.imag).astype(int))) == [-3, -1, 1, 3]

    @pytest.mark.parametrize("M", [4, 16, 64])
    def test_gray_neighbours_differ_by_one_bit(self, M):
        c = qam_constellation(M)
        step = np.min(np.abs(c[:, None] - c[None, :])[~np.eye(M, dtype=bool)])
        checked = 0
        for i in range(M):
            for j in range(M):
                if i != j and abs(abs(c[i] - c[j]) - step) < 1e-9:
                    assert bin(i ^ j).count("1") == 1, (i, j)
                    checked += 1
        m = int(math.isqrt(M))
        assert checked == 2 * 2 * m * (m - 1)

    @pytest.mark.parametrize("M", [4, 16, 64])
    def test_noiseless_roundtrip(self, M):
        idx = np.arange(M)
        assert np.array_equal(qam_demodulate(qam_modulate(idx, M), M), idx)

    def test_index_out_of_range(self):
        with pytest.raises(ValidationError):
            qam_modulate([16], 16)
        with pytest.raises(ValidationError):
            qam_modulate([-1], 16)

    @pytest.mark.parametrize("M", [2, 8, 12, 32])
    def test_bad_orders(self, M):
        with pytest.raises(ValidationError):
            qam_constellation(M)

    def test_demod_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for M in (4, 16, 64):
            c = qam_constellation(M)
            s = rng.normal(scale=0.8, size=20_000) + 1j * rng.normal(scale=0.8, size=20_000)
            brute = np.argmin(np.abs(s[:, None] - c[None, :]), axis=1)
            assert np.array_equal(qam_demodulate(s, M), brute)

    def test_ser_12db_matches_analytic(self):
        n = 10**6
        rng = np.random.default_rng(12)
        idx = rng.integers(0, 16, size=n)
        rx = qam_demodulate(awgn(qam_modulate(idx, 16), 12.0, seed=rng), 16)
        ser = np.mean(rx != idx)
        oracle = ser_16qam(10 ** 1.2)
        assert abs(ser - oracle) <= 0.25 * oracle

    def test_ser_very_low_snr_is_guessing(self):
        n = 10**6
        rng = np.random.default_rng(13)
        idx = rng.integers(0, 16, size=n)
        rx = qam_demodulate(awgn(qam_modulate(idx, 16), -20.0, seed=rng), 16)
        assert np.mean(rx != idx) == pytest.approx(15 / 16, rel=0.05)

    def test_batched_indices(self):
        idx = np.arange(32).reshape(2, 16) % 16
        block = qam_modulate(idx, 16)
        assert block.symbols.shape == (2, 16)
        assert np.array_equal(qam_demodulate(block, 16), idx)


class TestChannelConfig:
    def test_defaults(self):
        cfg = ChannelConfig()
        assert cfg.snr_db == 12.0 and cfg.kind == "awgn"

    def test_invalid(self):
        with pytest.raises(ValidationError):
            ChannelConfig(snr_db=float("nan"))
        with pytest.raises(ValidationError):
            ChannelConfig(modulation="qam", order=8)
        with pytest.raises(ValidationError):
            ChannelConfig(kind="rayleigh")
