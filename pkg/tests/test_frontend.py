import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtlsv import frontend as fe
from vtlsv.corpus import Utterance
from vtlsv.errors import DataError


def tone(freq=1000.0, seconds=1.0, rate=16000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return Utterance(amp * np.sin(2 * np.pi * freq * t), rate, "spk", "tone", "0")


CFG = fe.FrontendConfig()


class TestWarpFrequency:
    def test_identity_at_one(self):
        w = fe.WarpConfig(1.0, 8000.0, 6800.0)
        assert fe.warp_frequency(4000.0, w) == 4000.0

    def test_lower_branch(self):
        w = fe.WarpConfig(1.1, 8000.0, 6800.0)
        assert fe.warp_frequency(4000.0, w) == pytest.approx(4400.0, abs=1e-9)

    def test_upper_branch(self):
        # ((8000 - 7480) / 1200) * 200 + 7480
        w = fe.WarpConfig(1.1, 8000.0, 6800.0)
        assert fe.warp_frequency(7000.0, w) == pytest.approx(7566.666666666667, abs=1e-9)

    @pytest.mark.parametrize("alpha", fe.ALPHA_GRID)
    def test_fixes_fmax(self, alpha):
        assert fe.warp_frequency(8000.0, fe.WarpConfig(alpha, 8000.0)) == 8000.0

    def test_default_boundary(self):
        assert fe.WarpConfig(1.0, 8000.0).f0_boundary == pytest.approx(6800.0)
        assert fe.WarpConfig(1.16, 8000.0).boundary == pytest.approx(6800.0)

    @pytest.mark.parametrize("alpha", [1.18, 1.20])
    def test_boundary_lowered_where_warp_would_fold(self, alpha):
        w = fe.WarpConfig(alpha, 8000.0)
        assert w.boundary == pytest.approx(6800.0 / alpha)
        assert fe.warp_frequency(7000.0, w) < 8000.0

    def test_out_of_range(self):
        with pytest.raises(DataError):
            fe.warp_frequency(8001.0, fe.WarpConfig(1.0, 8000.0))
        with pytest.raises(DataError):
            fe.WarpConfig(1.3, 8000.0)

    def test_grid(self):
        assert len(fe.ALPHA_GRID) == 21
        assert fe.ALPHA_GRID[0] == 0.8 and fe.ALPHA_GRID[-1] == 1.2 and 1.0 in fe.ALPHA_GRID

    @given(st.sampled_from(fe.ALPHA_GRID), st.floats(1000.0, 24000.0))
    def test_continuity_and_monotonicity(self, alpha, fmax):
        w = fe.WarpConfig(alpha, fmax)
        f0 = w.boundary
        upper = (fmax - alpha * f0) / (fmax - f0) * (f0 - f0) + alpha * f0
        assert abs(alpha * f0 - upper) < 1e-9 * fmax
        fw = fe.warp_frequency(np.linspace(0.0, fmax, 1000), w)
        assert np.all(np.diff(fw) > 0)
        assert fw[0] == 0.0 and fw[-1] == fmax


class TestWarpSpectrum:
    def test_identity(self):
        s = np.random.default_rng(0).random(257)
        assert np.array_equal(fe.warp_spectrum(s, fe.WarpConfig(1.0, 8000.0)), s)

    def test_peak_moves_down(self):
        freqs = np.linspace(0, 8000, 257)
        s = np.zeros(257)
        s[np.argmin(np.abs(freqs - 1000.0))] = 1.0
        out = fe.warp_spectrum(s, fe.WarpConfig(1.1, 8000.0))
        assert abs(freqs[np.argmax(out)] - 1000.0 / 1.1) <= 8000 / 256


class TestStaticMfcc:
    def test_frame_count(self):
        assert fe.frame_count(32000, CFG) == (32000 - 400) // 160 + 1 == 198
        utt = tone(seconds=2.0)
        assert fe.compute_static_mfcc(utt, CFG, fe.WarpConfig()).values.shape == (19, 198)

    def test_stationary_tone(self):
        v = fe.compute_static_mfcc(tone(), CFG, fe.WarpConfig()).values
        assert np.max(np.abs(v - v[:, :1])) < 1e-6

    def test_warp_changes_cepstra_near_tone(self):
        utt = tone()
        p = fe.power_spectrum(utt, CFG)
        base = fe.log_mel(p, CFG, fe.WarpConfig(1.0))[0]
        warped = fe.log_mel(p, CFG, fe.WarpConfig(1.1))[0]
        centers = fe.mel_to_hz(np.linspace(0, fe.hz_to_mel(8000.0), CFG.n_mel_filters + 2))[1:-1]
        biggest = np.argmax(np.abs(warped - base))
        assert 500.0 < centers[biggest] < 1500.0
        c1 = fe.compute_static_mfcc(utt, CFG, fe.WarpConfig(1.0)).values
        c2 = fe.compute_static_mfcc(utt, CFG, fe.WarpConfig(1.1)).values
        assert not np.allclose(c1, c2)

    def test_too_short(self):
        with pytest.raises(DataError):
            fe.compute_static_mfcc(Utterance(np.ones(100), 16000, "a", "b", "c"), CFG, None)


class TestRasta:
    def _impulse(self):
        x = np.zeros((19, 20))
        x[3, 5] = 1.0
        return x

    def test_impulse_response(self):
        out = fe.rasta_filter(fe.FeatureMatrix(self._impulse())).values[3]
        # hand iteration of y[t] = 0.98 y[t-1] + 0.1 (2x[t] + x[t-1] - x[t-3] - 2x[t-4])
        x = self._impulse()[3]
        y = np.zeros(20)
        for t in range(20):
            acc = 0.98 * y[t - 1] if t else 0.0
            for k, c in enumerate((0.2, 0.1, 0.0, -0.1, -0.2)):
                if t - k >= 0:
                    acc += c * x[t - k]
            y[t] = acc
        np.testing.assert_allclose(out, y, atol=1e-12)

    def test_constant_decays(self):
        out = fe.rasta_filter(fe.FeatureMatrix(np.ones((19, 300)))).values
        # after the 4-frame warm-up only the pole remains
        np.testing.assert_allclose(out[:, 5:], 0.98 * out[:, 4:-1], rtol=1e-12)
        assert np.all(np.abs(out[:, -1]) < np.abs(out[:, 4]) * 0.98 ** 290)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2, 19, 50))
        f = lambda v: fe.rasta_filter(fe.FeatureMatrix(v)).values
        np.testing.assert_allclose(f(2.5 * x - 0.7 * y), 2.5 * f(x) - 0.7 * f(y), atol=1e-10)

    def test_shift_equivariance(self):
        x = np.random.default_rng(2).standard_normal((19, 60))
        shifted = np.concatenate([np.zeros((19, 7)), x], axis=1)
        f = lambda v: fe.rasta_filter(fe.FeatureMatrix(v)).values
        np.testing.assert_allclose(f(shifted)[:, 7:], f(x), atol=1e-10)

    def test_short(self):
        with pytest.raises(DataError):
            fe.rasta_filter(fe.FeatureMatrix(np.ones((19, 4))))

    def test_numerator_closed_forms(self):
        assert np.all(fe.rasta_numerator(np.full((3, 12), 0.37))[:, 4:] == 0.0)
        assert np.all(fe.rasta_numerator(np.tile(np.arange(12.0) - 5.0, (3, 1)))[:, 4:] == 1.0)

    def test_numerator_matches_taps(self):
        x = np.random.default_rng(3).standard_normal((4, 30))
        ref = np.stack([np.convolve(row, fe.RASTA_NUM)[:30] for row in x])
        np.testing.assert_allclose(fe.rasta_numerator(x), ref, atol=1e-14)


class TestDeltas:
    def test_constant(self):
        out = fe.append_deltas(fe.FeatureMatrix(np.full((19, 30), 3.0))).values
        assert out.shape == (57, 30)
        assert np.all(out[19:] == 0.0)

    def test_ramp(self):
        x = np.zeros((19, 30))
        x[0] = np.arange(30)
        out = fe.append_deltas(fe.FeatureMatrix(x)).values
        assert np.all(out[19, 2:-2] == 1.0)
        assert np.all(out[38, 4:-4] == 0.0)

    def test_short(self):
        with pytest.raises(DataError):
            fe.append_deltas(fe.FeatureMatrix(np.ones((19, 3))))


class TestVad:
    def test_burst_in_silence(self):
        x = np.zeros(16000)
        x[8000:9600] = 0.5 * np.sin(np.arange(1600) * 0.3)
        mask = fe.vad_select(Utterance(x, 16000, "a", "b", "c"), CFG)
        frames = np.flatnonzero(mask)
        assert frames.min() * 160 + 400 > 8000 and frames.max() * 160 < 9600

    def test_tone_keeps_all(self):
        assert fe.vad_select(tone(), CFG).all()

    def test_half_silence(self):
        rng = np.random.default_rng(0)
        n = 98 * 160 + 240
        x = np.concatenate([0.5 * rng.standard_normal(n), 1e-4 * rng.standard_normal(n)])
        utt = Utterance(x, 16000, "a", "b", "c")
        e = fe.frame_log_energy(utt, CFG)
        quiet = int(np.sum(e < e.max() - 30.0))
        mask = fe.vad_select(utt, CFG)
        assert mask.sum() == mask.size - quiet
        assert abs(mask.mean() - 0.5) < 0.05

    def test_never_empty(self):
        mask = fe.vad_select(Utterance(np.zeros(4000), 16000, "a", "b", "c"), CFG)
        assert mask.sum() >= 1


class TestCmvn:
    def test_moments(self):
        x = np.random.default_rng(3).normal(5.0, 3.0, (57, 80))
        mask = np.random.default_rng(4).random(80) > 0.3
        out = fe.cmvn(fe.FeatureMatrix(x), mask).values
        assert out.shape == (57, mask.sum())
        assert np.all(np.abs(out.mean(1)) < 1e-9)
        assert np.all(np.abs(out.var(1) - 1.0) < 1e-6)

    def test_zero_variance_floor(self):
        with pytest.warns(RuntimeWarning):
            out = fe.cmvn(fe.FeatureMatrix(np.full((57, 10), 2.0)))
        assert np.all(np.isfinite(out.values)) and out.warnings

    def test_needs_two_frames(self):
        with pytest.raises(DataError):
            fe.cmvn(fe.FeatureMatrix(np.ones((57, 5))), np.array([1, 0, 0, 0, 0], bool))


@pytest.fixture(scope="module")
def speechlike():
    from vtlsv.corpus import random_phrase, random_speaker, synth_utterance
    rng = np.random.default_rng(7)
    return synth_utterance(random_speaker(rng), random_phrase("p", rng), 3)


class TestPipeline:
    def test_alpha_one_is_unwarped(self, speechlike):
        a = fe.extract(speechlike, CFG, 1.0).values
        b = fe.extract(speechlike, CFG, None).values
        assert a.shape[0] == 57
        assert np.array_equal(a, b)

    def test_grid(self, speechlike):
        grid = fe.extract_grid(speechlike, CFG)
        assert sorted(grid) == list(fe.ALPHA_GRID)
        assert len({g.n_frames for g in grid.values()}) == 1
        assert np.array_equal(grid[1.0].values, fe.extract(speechlike, CFG, 1.0).values)
        for g in grid.values():
            assert g.dim == 57 and np.all(np.isfinite(g.values))

    def test_off_grid_alpha(self, speechlike):
        with pytest.raises(DataError):
            fe.extract_grid(speechlike, CFG, alphas=(1.01,))
