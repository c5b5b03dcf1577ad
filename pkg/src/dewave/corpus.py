"""Data model, dataset files, synthetic corpus generation, and wave preprocessing.

A dataset on disk is a directory with `manifest.json` plus one binary wave
file per sample:

    manifest.json   {"fs": <Hz>, "records": [{id, subject, split, tokens,
                     wave, fixations}, ...]}
    waves/*.dweeg   8-byte magic "DWEEG\\0\\0\\0", u32 LE channels, u32 LE
                    samples, then channels x samples float32 LE row-major.

Values are immutable after construction; wave arrays are marked read-only.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, MissingWordError

WAVE_MAGIC = b"DWEEG\0\0\0"

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

SPLITS = ("train", "dev", "test")

_WORD_RE = re.compile(r"[^a-z0-9]+")


def normalize_token(raw: str) -> str:
    """Lowercase and drop punctuation; one word in, one word out."""
    word = _WORD_RE.sub("", raw.lower())
    if not word:
        raise DataError(f"token {raw!r} is empty after normalization")
    return word


@dataclass(frozen=True)
class Vocabulary:
    """Id <-> word table. Ids 0..3 are PAD, BOS, EOS, UNK."""

    words: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        all_words = SPECIAL_TOKENS + tuple(sorted(set(words)))
        return cls(words=all_words, index={w: i for i, w in enumerate(all_words)})

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        return self.words[token_id]


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with their normalized and raw surface forms."""

    ids: tuple[int, ...]
    words: tuple[str, ...]   # normalized, one per content token
    raw: tuple[str, ...]     # as stored in the manifest

    def __post_init__(self):
        if not self.ids:
            raise DataError("empty token sequence")

    @classmethod
    def from_raw(cls, raw_tokens, vocab: Vocabulary) -> "TokenSequence":
        if not raw_tokens:
            raise DataError("empty token list")
        words = tuple(normalize_token(t) for t in raw_tokens)
        ids = (BOS_ID,) + tuple(vocab.id_of(w) for w in words) + (EOS_ID,)
        return cls(ids=ids, words=words, raw=tuple(raw_tokens))


@dataclass(frozen=True)
class EEGRecording:
    """Multichannel wave with its sampling rate and subject tag."""

    data: np.ndarray  # channels x samples, read-only
    fs: float
    subject: str

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"recording must be channels x samples, got shape {arr.shape}")
        if self.fs <= 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FixationSpan:
    start: int
    end: int  # exclusive
    word_index: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise DataError(f"bad fixation span [{self.start}, {self.end})")
        if self.word_index < 0:
            raise DataError(f"negative word_index {self.word_index}")


@dataclass(frozen=True)
class Sample:
    """One (EEG source, fixation spans, token sequence) pair."""

    sample_id: int
    recording: EEGRecording
    fixations: tuple[FixationSpan, ...]
    text: TokenSequence
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        n_words = len(self.text.words)
        for span in self.fixations:
            if span.word_index >= n_words:
                raise DataError(
                    f"sample {self.sample_id}: fixation word_index {span.word_index} "
                    f">= token count {n_words}"
                )
            if span.end > self.recording.samples:
                raise DataError(
                    f"sample {self.sample_id}: fixation span [{span.start}, {span.end}) "
                    f"outside recording of {self.recording.samples} samples"
                )


# ---------------------------------------------------------------------------
# wave preprocessing
# ---------------------------------------------------------------------------


def normalize_wave(rec: EEGRecording) -> EEGRecording:
    """Affine map of the whole recording onto [0, 1]; constant input maps to zeros."""
    lo = rec.data.min()
    hi = rec.data.max()
    if hi == lo:
        data = np.zeros_like(rec.data)
    else:
        data = (rec.data - lo) / (hi - lo)
    return replace(rec, data=data)


def pad_or_clip(rec: EEGRecording, target: int = 5500) -> EEGRecording:
    """Force the recording to exactly `target` samples (clip end / zero-pad right)."""
    if target < 1:
        raise ConfigError(f"pad target must be >= 1, got {target}")
    n = rec.samples
    if n == target:
        return rec
    if n > target:
        data = rec.data[:, :target]
    else:
        data = np.zeros((rec.channels, target))
        data[:, :n] = rec.data
    return replace(rec, data=data)


def slice_by_fixations(sample: Sample) -> list[np.ndarray]:
    """One channels x duration fragment per word, in word order.

    Several spans for the same word are concatenated along time in span
    order. Every word must be covered by at least one span.
    """
    if not sample.fixations:
        raise DataError(f"sample {sample.sample_id} has no fixation spans")
    n_samples = sample.recording.samples
    by_word: dict[int, list[np.ndarray]] = {}
    for span in sample.fixations:
        if span.end > n_samples:
            raise DataError(
                f"sample {sample.sample_id}: span [{span.start}, {span.end}) out of "
                f"range for {n_samples} samples"
            )
        by_word.setdefault(span.word_index, []).append(
            sample.recording.data[:, span.start:span.end]
        )
    n_words = len(sample.text.words)
    missing = set(range(n_words)) - set(by_word)
    if missing:
        raise MissingWordError(missing)
    return [np.concatenate(by_word[w], axis=1) for w in range(n_words)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 50
    sentences: int = 32
    len_min: int = 4
    len_max: int = 8
    channels: int = 105
    fs: float = 500.0
    noise: float = 0.05
    subjects: int = 1
    word_dur_min: int = 100
    word_dur_max: int = 160

    def validate(self) -> None:
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must be >= 5, got {self.vocab_size}")
        if self.sentences < 1:
            raise ConfigError(f"sentences must be >= 1, got {self.sentences}")
        if not (1 <= self.len_min <= self.len_max):
            raise ConfigError(f"bad sentence length range [{self.len_min}, {self.len_max}]")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.fs <= 0:
            raise ConfigError(f"fs must be positive, got {self.fs}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.subjects < 1:
            raise ConfigError(f"subjects must be >= 1, got {self.subjects}")
        if not (8 <= self.word_dur_min <= self.word_dur_max):
            raise ConfigError(
                f"bad word duration range [{self.word_dur_min}, {self.word_dur_max}]"
            )


def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 by sentence: dev and test each get floor(n/10)."""
    n_dev = n // 10
    n_test = n // 10
    return n - n_dev - n_test, n_dev, n_test


def synth_corpus(cfg: SynthConfig, seed: int) -> list[Sample]:
    """Deterministic synthetic dataset whose wave -> text mapping is learnable.

    Every vocabulary word has a fixed per-channel oscillation template with
    its own frequency, phases, and amplitudes; a sentence wave is the
    concatenation of its word templates plus Gaussian noise. Fixation spans
    mark the template boundaries, one contiguous span per word.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)

    width = max(2, len(str(cfg.vocab_size - 1)))
    lexicon = [f"w{i:0{width}d}" for i in range(cfg.vocab_size)]
    f_lo, f_hi = 4.0, min(45.0, 0.45 * cfg.fs)
    durations = rng.integers(cfg.word_dur_min, cfg.word_dur_max + 1, size=cfg.vocab_size)
    templates = []
    for v in range(cfg.vocab_size):
        freq = f_lo + (f_hi - f_lo) * (v + rng.uniform(0.0, 0.5)) / cfg.vocab_size
        phase = rng.uniform(0.0, 2 * np.pi, size=cfg.channels)
        amp = rng.uniform(0.5, 1.0, size=cfg.channels)
        t = np.arange(durations[v]) / cfg.fs
        templates.append(amp[:, None] * np.sin(2 * np.pi * freq * t[None, :] + phase[:, None]))

    n_train, n_dev, n_test = split_counts(cfg.sentences)
    records = []
    for i in range(cfg.sentences):
        length = int(rng.integers(cfg.len_min, cfg.len_max + 1))
        word_ids = rng.integers(0, cfg.vocab_size, size=length)
        parts, fixations, cursor = [], [], 0
        for w_pos, v in enumerate(word_ids):
            frag = templates[v]
            parts.append(frag)
            fixations.append((cursor, cursor + frag.shape[1], w_pos))
            cursor += frag.shape[1]
        wave = np.concatenate(parts, axis=1)
        # noise is always drawn so corpora with different noise levels share
        # sentence structure for a given seed
        wave = wave + cfg.noise * rng.standard_normal(wave.shape)
        # quantize to float32 so in-memory data matches a save/load round trip
        wave = wave.astype(np.float32).astype(np.float64)
        split = "train" if i < n_train else ("dev" if i < n_train + n_dev else "test")
        records.append({
            "id": i,
            "subject": f"S{i % cfg.subjects:02d}",
            "split": split,
            "tokens": [lexicon[v] for v in word_ids],
            "fixations": fixations,
            "wave_data": wave,
        })
    return _samples_from_records(records, cfg.fs)


def build_vocabulary(records_or_samples) -> Vocabulary:
    """Vocabulary from the training split's normalized words."""
    words = []
    for item in records_or_samples:
        if isinstance(item, Sample):
            if item.split == "train":
                words.extend(item.text.words)
        else:
            if item["split"] == "train":
                words.extend(normalize_token(t) for t in item["tokens"])
    return Vocabulary.from_words(words)


def _samples_from_records(records, fs: float) -> list[Sample]:
    vocab = build_vocabulary(records)
    samples = []
    for rec in records:
        text = TokenSequence.from_raw(rec["tokens"], vocab)
        recording = EEGRecording(data=rec["wave_data"], fs=fs, subject=rec["subject"])
        fixations = tuple(FixationSpan(int(s), int(e), int(w)) for s, e, w in rec["fixations"])
        samples.append(Sample(
            sample_id=int(rec["id"]),
            recording=recording,
            fixations=fixations,
            text=text,
            split=rec["split"],
        ))
    return samples


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------


def _write_wave(path: Path, data: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(WAVE_MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(data.astype("<f4").tobytes(order="C"))


def _read_wave(path: Path) -> np.ndarray:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read wave file ({exc})") from exc
    if blob[:8] != WAVE_MAGIC:
        raise DataError(f"{path}: bad wave magic")
    if len(blob) < 16:
        raise DataError(f"{path}: truncated wave header")
    channels, samples = struct.unpack("<II", blob[8:16])
    expected = 16 + 4 * channels * samples
    if len(blob) != expected:
        raise DataError(
            f"{path}: wave payload is {len(blob) - 16} bytes, header says "
            f"{channels}x{samples} ({expected - 16} bytes)"
        )
    data = np.frombuffer(blob[16:], dtype="<f4").reshape(channels, samples)
    return data.astype(np.float64)


_RECORD_KEYS = {"id", "subject", "split", "tokens", "wave", "fixations"}


def save_dataset(samples: list[Sample], path) -> None:
    """Write a dataset directory; save(load(dir)) reproduces it byte for byte."""
    if not samples:
        raise DataError("cannot save an empty dataset")
    fs = samples[0].recording.fs
    if any(s.recording.fs != fs for s in samples):
        raise DataError("samples disagree on sampling rate")
    root = Path(path)
    (root / "waves").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        wave_rel = f"waves/{s.sample_id:04d}.dweeg"
        _write_wave(root / wave_rel, s.recording.data)
        records.append({
            "id": s.sample_id,
            "subject": s.recording.subject,
            "split": s.split,
            "tokens": list(s.text.raw),
            "wave": wave_rel,
            "fixations": [[f.start, f.end, f.word_index] for f in s.fixations],
        })
    manifest = {"fs": fs, "records": records}
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> list[Sample]:
    """Load a dataset directory, validating files and manifest consistency."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"{manifest_path}: manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or set(manifest) != {"fs", "records"}:
        raise DataError(f"{manifest_path}: expected exactly the keys 'fs' and 'records'")
    fs = manifest["fs"]
    if not isinstance(fs, (int, float)) or fs <= 0:
        raise DataError(f"{manifest_path}: bad sampling rate {fs!r}")
    raw_records = manifest["records"]
    if not isinstance(raw_records, list) or not raw_records:
        raise DataError(f"{manifest_path}: records must be a non-empty list")

    records = []
    seen_ids = set()
    for i, rec in enumerate(raw_records):
        if not isinstance(rec, dict) or set(rec) != _RECORD_KEYS:
            raise DataError(
                f"{manifest_path}: record {i} must have exactly the keys "
                f"{sorted(_RECORD_KEYS)}"
            )
        if not isinstance(rec["id"], int) or rec["id"] in seen_ids:
            raise DataError(f"{manifest_path}: record {i} has a bad or duplicate id")
        seen_ids.add(rec["id"])
        if rec["split"] not in SPLITS:
            raise DataError(f"{manifest_path}: record {rec['id']} has split {rec['split']!r}")
        if not isinstance(rec["tokens"], list) or not rec["tokens"] or \
                not all(isinstance(t, str) for t in rec["tokens"]):
            raise DataError(f"{manifest_path}: record {rec['id']} has bad tokens")
        wave_path = root / rec["wave"]
        data = _read_wave(wave_path)
        n_tokens = len(rec["tokens"])
        fixations = []
        for fx in rec["fixations"]:
            if (not isinstance(fx, list)) or len(fx) != 3 or \
                    not all(isinstance(v, int) for v in fx):
                raise DataError(
                    f"{manifest_path}: record {rec['id']} has a malformed fixation {fx!r}"
                )
            start, end, widx = fx
            if not (0 <= start < end <= data.shape[1]):
                raise DataError(
                    f"{manifest_path}: record {rec['id']} fixation [{start}, {end}) "
                    f"outside wave of {data.shape[1]} samples"
                )
            if not (0 <= widx < n_tokens):
                raise DataError(
                    f"{manifest_path}: record {rec['id']} word_index {widx} "
                    f">= token count {n_tokens}"
                )
            fixations.append((start, end, widx))
        records.append({
            "id": rec["id"],
            "subject": rec["subject"],
            "split": rec["split"],
            "tokens": rec["tokens"],
            "fixations": fixations,
            "wave_data": data,
        })
    return _samples_from_records(records, float(fs))
