"""Band-power feature tests, checked against a naive DFT oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dewave.corpus import EEGRecording, FixationSpan, Sample, SynthConfig, TokenSequence, Vocabulary, synth_corpus
from dewave.errors import ConfigError, DataError
from dewave.featurizer import (
    DEFAULT_BANDS,
    BandSpec,
    band_power_features,
    feature_dim,
    featurize_sample,
    read_feature_matrix,
    write_feature_matrix,
)

FS = 500.0


def naive_band_stats(fragment, fs, bands=DEFAULT_BANDS):
    """Independent oracle: explicit O(n^2) DFT and per-band mean/max power."""
    fragment = np.asarray(fragment, dtype=float)
    channels, n = fragment.shape
    nyquist = fs / 2.0
    ks = np.arange(n // 2 + 1)
    freqs = ks * fs / n
    out = np.zeros((channels, len(bands), 2))
    t = np.arange(n)
    for c in range(channels):
        spectrum = np.array([
            abs(sum(fragment[c, j] * np.exp(-2j * np.pi * k * j / n) for j in t)) ** 2 / n
            for k in ks
        ])
        for b, band in enumerate(bands):
            high = nyquist if band.high is None else band.high
            sel = (freqs >= band.low) & (freqs <= high)
            # shared-edge rule: a bin equal to another band's upper edge
            # belongs to that lower band only
            for other in bands:
                if other is not band and other.high is not None and other.high == band.low:
                    sel &= freqs != other.high
            if sel.any():
                out[c, b, 0] = spectrum[sel].mean()
                out[c, b, 1] = spectrum[sel].max()
    return out.reshape(-1)


def tone(freq, channels=2, duration=100, fs=FS, amp=1.0):
    t = np.arange(duration) / fs
    return np.tile(amp * np.sin(2 * np.pi * freq * t), (channels, 1))


class TestBandPowerFeatures:
    def test_zero_fragment_gives_zero_vector(self):
        out = band_power_features(np.zeros((105, 64)), FS)
        assert out.values.shape == (840,)
        np.testing.assert_array_equal(out.values, np.zeros(840))

    def test_matches_naive_dft_oracle(self):
        rng = np.random.default_rng(17)
        frag = rng.normal(size=(2, 40))
        got = band_power_features(frag, FS).values
        want = naive_band_stats(frag, FS)
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)

    def test_pure_alpha_tone_dominates_alpha_band(self):
        frag = tone(10.0, channels=3, duration=200)
        vals = band_power_features(frag, FS).values.reshape(3, 4, 2)
        means = vals[:, :, 0]
        for c in range(3):
            assert means[c, 1] > means[c, 0]
            assert means[c, 1] > means[c, 2]
            assert means[c, 1] > means[c, 3]

    def test_105_channels_give_840_dims(self):
        frag = np.random.default_rng(0).normal(size=(105, 50))
        out = band_power_features(frag, FS)
        assert out.values.shape == (840,)
        assert feature_dim(105) == 840

    @pytest.mark.parametrize("duration", [8, 100, 1000])
    def test_dimensionality_independent_of_duration(self, duration):
        frag = np.random.default_rng(1).normal(size=(4, duration))
        assert band_power_features(frag, FS).values.shape == (32,)

    @given(st.floats(0.1, 40.0))
    @settings(max_examples=30, deadline=None)
    def test_power_scales_quadratically(self, a):
        rng = np.random.default_rng(23)
        frag = rng.normal(size=(2, 64))
        base = band_power_features(frag, FS).values
        scaled = band_power_features(a * frag, FS).values
        np.testing.assert_allclose(scaled, a * a * base, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("freq,band_idx", [(6.0, 0), (10.0, 1), (20.0, 2), (60.0, 3)])
    def test_tone_in_exactly_one_band_peaks_there(self, freq, band_idx):
        frag = tone(freq, channels=1, duration=500)
        means = band_power_features(frag, FS).values.reshape(1, 4, 2)[0, :, 0]
        assert means.argmax() == band_idx

    def test_shared_edge_goes_to_lower_band(self):
        # 30 Hz bin: upper edge of beta, lower edge of gamma
        frag = tone(30.0, channels=1, duration=100)
        means = band_power_features(frag, FS).values.reshape(1, 4, 2)[0, :, 0]
        assert means[2] > 1.0
        assert means[3] < 1e-12 * means[2]

    def test_too_short_fragment(self):
        with pytest.raises(DataError, match="short"):
            band_power_features(np.zeros((2, 7)), FS)

    def test_non_finite_input(self):
        frag = np.zeros((2, 16))
        frag[0, 3] = np.nan
        with pytest.raises(DataError, match="finite"):
            band_power_features(frag, FS)

    def test_sampling_rate_too_low_for_band(self):
        with pytest.raises(ConfigError, match="beta"):
            band_power_features(np.zeros((1, 32)), fs=50.0)

    def test_custom_bands(self):
        bands = (BandSpec("low", 1.0, 5.0), BandSpec("high", 5.0, None))
        out = band_power_features(np.ones((2, 16)), FS, bands=bands)
        assert out.values.shape == (2 * 2 * 2,)


class TestFeaturizeSample:
    def _make_sample(self, n_words, dur=40, channels=3):
        words = [f"w{i:02d}" for i in range(n_words)]
        vocab = Vocabulary.from_words(words)
        text = TokenSequence.from_raw(words, vocab)
        fixations = tuple(FixationSpan(i * dur, (i + 1) * dur, i) for i in range(n_words))
        rng = np.random.default_rng(n_words)
        rec = EEGRecording(data=rng.normal(size=(channels, n_words * dur)),
                           fs=FS, subject="S00")
        return Sample(sample_id=0, recording=rec, fixations=fixations,
                      text=text, split="train")

    def test_three_words_pad_to_56(self):
        fs = featurize_sample(self._make_sample(3))
        assert fs.values.shape == (56, feature_dim(3))
        assert fs.mask.sum() == 3
        assert fs.mask[:3].all() and not fs.mask[3:].any()
        np.testing.assert_array_equal(fs.values[3:], 0.0)

    def test_sixty_words_clip_to_56(self):
        fs = featurize_sample(self._make_sample(60, dur=10))
        assert fs.values.shape == (56, feature_dim(3))
        assert fs.word_count == 56

    def test_composition_matches_direct_band_power(self):
        sample = self._make_sample(4)
        fs = featurize_sample(sample)
        from dewave.corpus import slice_by_fixations
        for w, frag in enumerate(slice_by_fixations(sample)):
            direct = band_power_features(frag, FS, word_index=w)
            np.testing.assert_array_equal(fs.values[w], direct.values)

    def test_smaller_max_words(self):
        fs = featurize_sample(self._make_sample(3), max_words=8)
        assert fs.values.shape == (8, feature_dim(3))


class TestFeatureMatrixIO:
    def test_round_trip(self, tmp_path):
        mat = np.random.default_rng(4).normal(size=(5, 7)).astype(np.float32)
        path = tmp_path / "f.bin"
        write_feature_matrix(path, mat)
        back = read_feature_matrix(path)
        np.testing.assert_array_equal(back, mat.astype(np.float64))

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "f.bin"
        write_feature_matrix(path, np.zeros((3, 3)))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataError, match="payload"):
            read_feature_matrix(path)
