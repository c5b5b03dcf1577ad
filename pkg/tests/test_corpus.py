"""Data model, preprocessing, synthesis, and dataset I/O tests."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dewave.corpus import (
    BOS_ID,
    EOS_ID,
    UNK_ID,
    EEGRecording,
    FixationSpan,
    Sample,
    SynthConfig,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    load_dataset,
    normalize_wave,
    pad_or_clip,
    save_dataset,
    slice_by_fixations,
    split_counts,
    synth_corpus,
)
from dewave.errors import ConfigError, DataError, MissingWordError


def _rec(data, fs=500.0, subject="S00"):
    return EEGRecording(data=np.asarray(data, dtype=float), fs=fs, subject=subject)


def _sample(data, fixations, words, split="train", sample_id=0):
    vocab = Vocabulary.from_words(words)
    text = TokenSequence.from_raw(list(words), vocab)
    return Sample(sample_id=sample_id, recording=_rec(data),
                  fixations=tuple(FixationSpan(*f) for f in fixations),
                  text=text, split=split)


class TestNormalizeWave:
    def test_affine_range_map(self):
        rec = _rec(np.linspace(-5, 5, 40).reshape(4, 10))
        out = normalize_wave(rec)
        assert out.data.min() == 0.0
        assert out.data.max() == 1.0

    def test_constant_input_maps_to_zeros(self):
        out = normalize_wave(_rec(np.full((3, 7), 3.0)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 7)))

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 10))
        out = normalize_wave(_rec(x))
        want = (x - x.min()) / (x.max() - x.min())
        np.testing.assert_array_equal(out.data, want)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=24).map(np.asarray))
    @settings(max_examples=60, deadline=None)
    def test_output_in_unit_interval_and_idempotent(self, flat):
        data = flat[:len(flat) - len(flat) % 2].reshape(2, -1)
        out = normalize_wave(_rec(data))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        again = normalize_wave(out)
        if data.max() > data.min():
            np.testing.assert_array_equal(again.data, out.data)

    def test_preserves_shape_and_metadata(self):
        rec = _rec(np.arange(12.0).reshape(3, 4), fs=250.0, subject="S03")
        out = normalize_wave(rec)
        assert out.data.shape == (3, 4)
        assert out.fs == 250.0 and out.subject == "S03"


class TestPadOrClip:
    def test_clips_long_input_at_the_end(self):
        rec = _rec(np.arange(2 * 6000.0).reshape(2, 6000))
        out = pad_or_clip(rec, 5500)
        assert out.samples == 5500
        np.testing.assert_array_equal(out.data, rec.data[:, :5500])

    def test_pads_short_input_with_zeros(self):
        rec = _rec(np.ones((2, 5000)))
        out = pad_or_clip(rec, 5500)
        assert out.samples == 5500
        np.testing.assert_array_equal(out.data[:, 5000:], np.zeros((2, 500)))
        np.testing.assert_array_equal(out.data[:, :5000], rec.data)

    def test_exact_length_is_identity(self):
        rec = _rec(np.random.default_rng(0).normal(size=(2, 5500)))
        out = pad_or_clip(rec, 5500)
        np.testing.assert_array_equal(out.data, rec.data)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            pad_or_clip(_rec(np.ones((1, 4))), 0)


class TestSliceByFixations:
    def test_contiguous_spans(self):
        s = _sample(np.arange(300.0).reshape(1, 300),
                    [(0, 100, 0), (100, 250, 1), (250, 300, 2)],
                    ["aa", "bb", "cc"])
        frags = slice_by_fixations(s)
        assert [f.shape[1] for f in frags] == [100, 150, 50]
        np.testing.assert_array_equal(frags[1], s.recording.data[:, 100:250])

    def test_multiple_spans_concatenate_in_order(self):
        s = _sample(np.arange(200.0).reshape(1, 200),
                    [(0, 50, 0), (80, 120, 0)], ["aa"])
        frags = slice_by_fixations(s)
        assert len(frags) == 1
        assert frags[0].shape[1] == 90
        np.testing.assert_array_equal(
            frags[0], np.concatenate([s.recording.data[:, 0:50],
                                      s.recording.data[:, 80:120]], axis=1))

    def test_span_out_of_range_rejected(self):
        with pytest.raises(DataError, match="outside|out of range"):
            _sample(np.zeros((1, 5500)), [(5400, 5600, 0)], ["aa"])

    def test_missing_word_error_lists_indices(self):
        s = _sample(np.zeros((1, 100)), [(0, 50, 1)], ["aa", "bb", "cc"])
        with pytest.raises(MissingWordError) as exc:
            slice_by_fixations(s)
        assert exc.value.word_indices == [0, 2]

    def test_no_fixations_is_an_error(self):
        s = _sample(np.zeros((1, 100)), [], ["aa"])
        with pytest.raises(DataError):
            slice_by_fixations(s)

    def test_total_fixated_samples_preserved(self):
        rng = np.random.default_rng(2)
        spans, cursor = [], 0
        for w in range(4):
            for _ in range(int(rng.integers(1, 3))):
                width = int(rng.integers(5, 20))
                spans.append((cursor, cursor + width, w))
                cursor += width + int(rng.integers(0, 4))
        s = _sample(rng.normal(size=(2, cursor + 10)), spans, ["a0", "a1", "a2", "a3"])
        frags = slice_by_fixations(s)
        assert sum(f.shape[1] for f in frags) == sum(e - b for b, e, _ in spans)


class TestTokenization:
    def test_bos_eos_and_ids(self):
        vocab = Vocabulary.from_words(["cat", "the"])
        ts = TokenSequence.from_raw(["The", "cat!"], vocab)
        assert ts.ids[0] == BOS_ID and ts.ids[-1] == EOS_ID
        assert ts.words == ("the", "cat")
        assert all(i < len(vocab) for i in ts.ids)

    def test_unknown_word_maps_to_unk(self):
        vocab = Vocabulary.from_words(["aa"])
        ts = TokenSequence.from_raw(["aa", "zz"], vocab)
        assert ts.ids[2] == UNK_ID

    def test_pure_punctuation_token_rejected(self):
        vocab = Vocabulary.from_words(["aa"])
        with pytest.raises(DataError):
            TokenSequence.from_raw(["?!"], vocab)

    def test_vocabulary_from_training_split_only(self):
        cfg = SynthConfig(vocab_size=30, sentences=20, channels=2,
                          len_min=2, len_max=4, word_dur_min=20, word_dur_max=30)
        samples = synth_corpus(cfg, seed=9)
        vocab = build_vocabulary(samples)
        train_words = {w for s in samples if s.split == "train" for w in s.text.words}
        assert set(vocab.words[4:]) == train_words


class TestSynthCorpus:
    def test_determinism_is_byte_identical(self, tmp_path):
        cfg = SynthConfig(vocab_size=10, sentences=8, channels=3,
                          len_min=2, len_max=4, word_dur_min=20, word_dur_max=30)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_dataset(synth_corpus(cfg, seed=42), d1)
        save_dataset(synth_corpus(cfg, seed=42), d2)
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        for f1 in sorted((d1 / "waves").iterdir()):
            assert f1.read_bytes() == (d2 / "waves" / f1.name).read_bytes()

    def test_hundred_sentences_split_80_10_10(self):
        cfg = SynthConfig(vocab_size=20, sentences=100, channels=2,
                          len_min=2, len_max=3, word_dur_min=16, word_dur_max=20)
        samples = synth_corpus(cfg, seed=1)
        counts = {split: sum(s.split == split for s in samples)
                  for split in ("train", "dev", "test")}
        assert counts == {"train": 80, "dev": 10, "test": 10}

    def test_split_counts_rule(self):
        assert split_counts(100) == (80, 10, 10)
        assert split_counts(32) == (26, 3, 3)
        assert split_counts(5) == (5, 0, 0)

    def test_splits_partition_the_corpus(self):
        cfg = SynthConfig(vocab_size=12, sentences=23, channels=2,
                          len_min=2, len_max=3, word_dur_min=16, word_dur_max=20)
        samples = synth_corpus(cfg, seed=3)
        ids = [s.sample_id for s in samples]
        assert sorted(ids) == list(range(23))
        assert len(set(ids)) == len(ids)

    def test_same_word_has_identical_template_without_noise(self):
        cfg = SynthConfig(vocab_size=6, sentences=12, channels=3, noise=0.0,
                          len_min=3, len_max=3, word_dur_min=20, word_dur_max=30)
        samples = synth_corpus(cfg, seed=5)
        segments = {}
        for s in samples:
            frags = slice_by_fixations(s)
            for w, frag in zip(s.text.words, frags):
                if w in segments:
                    np.testing.assert_array_equal(segments[w], frag)
                else:
                    segments[w] = frag
        assert len(segments) > 1

    def test_word_templates_padded_by_noise_only(self):
        cfg = SynthConfig(vocab_size=6, sentences=10, channels=2, noise=0.05,
                          len_min=2, len_max=3, word_dur_min=20, word_dur_max=30)
        samples = synth_corpus(cfg, seed=5)
        clean = synth_corpus(
            SynthConfig(**{**cfg.__dict__, "noise": 0.0}), seed=5)
        for a, b in zip(samples, clean):
            diff = a.recording.data - b.recording.data
            assert np.abs(diff).max() < 0.05 * 6

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            synth_corpus(SynthConfig(vocab_size=4), seed=0)
        with pytest.raises(ConfigError):
            synth_corpus(SynthConfig(sentences=0), seed=0)

    def test_subject_round_robin(self):
        cfg = SynthConfig(vocab_size=8, sentences=6, channels=2, subjects=3,
                          len_min=2, len_max=2, word_dur_min=16, word_dur_max=20)
        samples = synth_corpus(cfg, seed=2)
        assert [s.recording.subject for s in samples] == \
            ["S00", "S01", "S02", "S00", "S01", "S02"]


class TestDatasetIO:
    @pytest.fixture
    def corpus(self):
        cfg = SynthConfig(vocab_size=10, sentences=10, channels=3,
                          len_min=2, len_max=4, word_dur_min=20, word_dur_max=30)
        return synth_corpus(cfg, seed=11)

    def test_round_trip_identity(self, corpus, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        save_dataset(corpus, d1)
        loaded = load_dataset(d1)
        save_dataset(loaded, d2)
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        for f1 in sorted((d1 / "waves").iterdir()):
            assert f1.read_bytes() == (d2 / "waves" / f1.name).read_bytes()
        for a, b in zip(corpus, loaded):
            np.testing.assert_array_equal(a.recording.data, b.recording.data)
            assert a.text == b.text
            assert a.fixations == b.fixations
            assert (a.split, a.sample_id) == (b.split, b.sample_id)

    def test_truncated_wave_file(self, corpus, tmp_path):
        save_dataset(corpus, tmp_path)
        victim = sorted((tmp_path / "waves").iterdir())[0]
        victim.write_bytes(victim.read_bytes()[:-10])
        with pytest.raises(DataError, match=victim.name):
            load_dataset(tmp_path)

    def test_bad_wave_magic(self, corpus, tmp_path):
        save_dataset(corpus, tmp_path)
        victim = sorted((tmp_path / "waves").iterdir())[0]
        blob = victim.read_bytes()
        victim.write_bytes(b"XXXXXXXX" + blob[8:])
        with pytest.raises(DataError, match="magic"):
            load_dataset(tmp_path)

    def test_word_index_beyond_token_count(self, corpus, tmp_path):
        save_dataset(corpus, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["records"][0]["fixations"][0][2] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="word_index"):
            load_dataset(tmp_path)

    def test_unknown_record_key_rejected(self, corpus, tmp_path):
        save_dataset(corpus, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["records"][0]["extra"] = 1
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="record 0"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_dataset(tmp_path)

    def test_fixation_span_outside_wave(self, corpus, tmp_path):
        save_dataset(corpus, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["records"][0]["fixations"][0][1] = 10 ** 7
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="outside"):
            load_dataset(tmp_path)

    def test_wave_data_is_read_only(self, corpus):
        with pytest.raises(ValueError):
            corpus[0].recording.data[0, 0] = 99.0
