import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dct2_ortho_naive, dft_power_naive, mel_fb_naive
from tcresnet import features as F
from tcresnet.errors import FeatureError

CFG = F.DEFAULT_CONFIG


class TestFraming:
    def test_one_second(self):
        assert F.frame_signal(np.zeros(16000)).shape == (98, 480)

    def test_single_window(self):
        assert F.frame_signal(np.arange(480.0)).shape == (1, 480)

    def test_too_short(self):
        with pytest.raises(FeatureError):
            F.frame_signal(np.zeros(479))

    def test_frame_starts(self):
        x = np.arange(2000.0)
        frames = F.frame_signal(x)
        assert [f[0] for f in frames] == [160.0 * i for i in range(len(frames))]

    @given(st.integers(480, 20000))
    @settings(max_examples=40, deadline=None)
    def test_count_formula(self, n):
        assert len(F.frame_signal(np.zeros(n))) == 1 + (n - 480) // 160


class TestPowerSpectrum:
    def test_zero(self):
        assert not F.power_spectrum(np.zeros(480)).any()

    @pytest.mark.parametrize("k", [5, 32, 100, 200])
    def test_sinusoid_peak(self, k):
        n = np.arange(480)
        frame = np.cos(2 * np.pi * k * 16000 / 512 * n / 16000)
        assert int(np.argmax(F.power_spectrum(frame))) == k

    def test_vs_naive_dft(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            frame = rng.uniform(-1, 1, 480)
            got = F.power_spectrum(frame)
            ref = dft_power_naive(frame.tolist(), 512)
            big = ref > 1e-6 * ref.max()
            assert np.max(np.abs(got[big] - ref[big]) / ref[big]) < 1e-6
            assert np.max(np.abs(got - ref)) < 1e-6 * ref.max()


class TestMelFilterbank:
    def test_mel_formula(self):
        assert F.hz_to_mel(700) == pytest.approx(2595 * math.log10(2))
        assert F.hz_to_mel(700) == pytest.approx(781.17, abs=0.01)
        assert F.mel_to_hz(F.hz_to_mel(1234.5)) == pytest.approx(1234.5)

    def test_shape_and_rows(self):
        fb = F.mel_filterbank()
        assert fb.shape == (40, 257)
        assert (fb >= 0).all() and (fb <= 1).all()
        assert (fb.max(axis=1) > 0).all()

    def test_centers_increasing(self):
        c = F.mel_centers_hz()
        assert len(c) == 40 and (np.diff(c) > 0).all()
        assert CFG.mel_fmin < c[0] and c[-1] < CFG.mel_fmax

    def test_matches_naive(self):
        ref = mel_fb_naive(40, 512, 16000, 20.0, 4000.0)
        assert np.max(np.abs(F.mel_filterbank() - ref)) < 1e-12

    def test_peak_is_one_at_center(self):
        # a dense FFT grid samples every triangle close to its apex
        cfg = F.FeatureConfig(fft_size=2**16, n_mels=10, n_mfcc=10)
        assert F.mel_filterbank(cfg).max(axis=1) == pytest.approx(1.0, abs=2e-3)

    def test_too_many_filters(self):
        with pytest.raises(FeatureError, match="do not fit"):
            F.mel_filterbank(F.FeatureConfig(n_mels=400, n_mfcc=40, mel_fmin=20, mel_fmax=400))


class TestDct:
    def test_orthonormal(self):
        d = F.dct_matrix(40)
        assert np.max(np.abs(d @ d.T - np.eye(40))) < 1e-10

    def test_vs_naive(self):
        v = np.random.default_rng(3).normal(size=40)
        assert np.allclose(F.dct_matrix(40) @ v, dct2_ortho_naive(v.tolist()), atol=1e-12)

    def test_vs_scipy(self):
        fft = pytest.importorskip("scipy.fft")
        v = np.random.default_rng(4).normal(size=(5, 40))
        assert np.allclose(v @ F.dct_matrix(40).T, fft.dct(v, type=2, norm="ortho", axis=1), atol=1e-12)


class TestMfcc:
    def test_shape(self):
        x = np.random.default_rng(0).uniform(-0.5, 0.5, 16000)
        m = F.compute_mfcc(x)
        assert m.shape == (98, 40) and np.isfinite(m).all()

    def test_constant_rows_identical(self):
        m = F.compute_mfcc(np.full(16000, 0.25))
        assert np.allclose(m, m[0], atol=1e-9)

    def test_stage_composition(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.5, 0.5, 2000)
        fb = mel_fb_naive(40, 512, 16000, 20.0, 4000.0)
        rows = []
        for i in range(1 + (2000 - 480) // 160):
            frame = x[i * 160 : i * 160 + 480]
            logmel = np.log(fb @ dft_power_naive(frame.tolist(), 512) + 1e-12)
            rows.append(dct2_ortho_naive(logmel.tolist()))
        ref = np.array(rows)
        got = F.compute_mfcc(x)
        assert np.max(np.abs(got - ref)) < 1e-6

    def test_batch_matches_single(self):
        rng = np.random.default_rng(6)
        xs = rng.uniform(-0.5, 0.5, (3, 16000))
        batch = F.compute_mfcc_batch(xs)
        for x, b in zip(xs, batch):
            assert np.allclose(F.compute_mfcc(x), b, atol=1e-10)

    @pytest.mark.parametrize("alpha", [0.1, 0.5, 3.0])
    def test_scale_only_moves_c0(self, alpha):
        x = np.random.default_rng(7).uniform(-0.3, 0.3, 16000)
        delta = F.compute_mfcc(alpha * x) - F.compute_mfcc(x)
        expected_c0 = 2 * math.log(alpha) * math.sqrt(40)
        assert np.allclose(delta[:, 0], expected_c0, atol=1e-6)
        assert np.max(np.abs(delta[:, 1:])) < 1e-6

    def test_deterministic(self):
        x = np.random.default_rng(8).uniform(-1, 1, 16000)
        assert np.array_equal(F.compute_mfcc(x), F.compute_mfcc(x))

    def test_short_clip(self):
        with pytest.raises(FeatureError):
            F.compute_mfcc(np.zeros(100))


def test_mfc1_round_trip():
    m = np.random.default_rng(0).normal(size=(98, 40)).astype(np.float32)
    buf = io.BytesIO()
    F.write_mfcc(buf, m)
    raw = buf.getvalue()
    assert raw[:4] == b"MFC1" and len(raw) == 16 + 98 * 40 * 4
    assert int.from_bytes(raw[4:8], "little") == 98 and int.from_bytes(raw[8:12], "little") == 40
    buf.seek(0)
    assert np.array_equal(F.read_mfcc(buf), m)
    with pytest.raises(FeatureError):
        F.read_mfcc(io.BytesIO(b"XXXX" + raw[4:]))
