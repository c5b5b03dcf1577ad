"""Word-level frequency-band features: per channel and band, the mean and max
of the magnitude-squared spectrum restricted to the band.

The default bands are Theta 5-7 Hz, Alpha 8-13 Hz, Beta 12-30 Hz, and Gamma
from 30 Hz up to the Nyquist frequency. Band membership is inclusive on both
edges; where one band's upper edge coincides with another band's lower edge
(Beta/Gamma at 30 Hz), the shared bin counts only toward the lower band.
Bands with no spectral bin (very short fragments) contribute zeros, so the
output dimensionality never depends on fragment duration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Sample, slice_by_fixations
from .errors import ConfigError, DataError

N_STATS = 2  # mean power, max power


@dataclass(frozen=True)
class BandSpec:
    name: str
    low: float
    high: float | None  # None = open band up to Nyquist

    def __post_init__(self):
        if self.low < 0 or (self.high is not None and self.high <= self.low):
            raise ConfigError(f"bad band {self.name}: [{self.low}, {self.high}]")


DEFAULT_BANDS = (
    BandSpec("theta", 5.0, 7.0),
    BandSpec("alpha", 8.0, 13.0),
    BandSpec("beta", 12.0, 30.0),
    BandSpec("gamma", 30.0, None),
)


@dataclass(frozen=True)
class WordFeature:
    values: np.ndarray  # channels * bands * N_STATS, channel-major
    word_index: int


@dataclass(frozen=True)
class FeatureSequence:
    """Fixed-length feature matrix with a validity mask."""

    values: np.ndarray  # (max_words, channels * bands * N_STATS)
    mask: np.ndarray    # (max_words,) bool

    @property
    def word_count(self) -> int:
        return int(self.mask.sum())


def feature_dim(channels: int, bands=DEFAULT_BANDS) -> int:
    return channels * len(bands) * N_STATS


def _band_bins(freqs: np.ndarray, bands, nyquist: float) -> list[np.ndarray]:
    """Boolean bin masks per band, resolving shared edges toward the lower band."""
    masks = []
    for band in bands:
        high = nyquist if band.high is None else band.high
        masks.append((freqs >= band.low) & (freqs <= high))
    for i, a in enumerate(bands):
        if a.high is None:
            continue
        for j, b in enumerate(bands):
            if i != j and b.low == a.high:
                masks[j] &= freqs != a.high
    return masks


def band_power_features(fragment: np.ndarray, fs: float,
                        bands=DEFAULT_BANDS, word_index: int = -1) -> WordFeature:
    """Stats of in-band spectral power for one channels x duration fragment."""
    fragment = np.asarray(fragment, dtype=np.float64)
    if fragment.ndim != 2:
        raise DataError(f"fragment must be channels x duration, got shape {fragment.shape}")
    channels, duration = fragment.shape
    if duration < 8:
        raise DataError(f"fragment too short: {duration} samples, need at least 8")
    if not np.isfinite(fragment).all():
        raise DataError("fragment contains non-finite values")
    nyquist = fs / 2.0
    for band in bands:
        if band.high is not None and fs <= 2.0 * band.high:
            raise ConfigError(
                f"sampling rate {fs} Hz too low for band {band.name} up to {band.high} Hz"
            )

    power = np.abs(np.fft.rfft(fragment, axis=1)) ** 2 / duration
    freqs = np.fft.rfftfreq(duration, d=1.0 / fs)
    bins = _band_bins(freqs, bands, nyquist)

    values = np.zeros((channels, len(bands), N_STATS))
    for b, mask in enumerate(bins):
        if not mask.any():
            continue
        in_band = power[:, mask]
        values[:, b, 0] = in_band.mean(axis=1)
        values[:, b, 1] = in_band.max(axis=1)
    return WordFeature(values=values.reshape(-1), word_index=word_index)


def featurize_sample(sample: Sample, max_words: int = 56,
                     bands=DEFAULT_BANDS) -> FeatureSequence:
    """One feature row per word in text order, clipped/zero-padded to max_words."""
    fragments = slice_by_fixations(sample)
    fs = sample.recording.fs
    dim = feature_dim(sample.recording.channels, bands)
    values = np.zeros((max_words, dim))
    mask = np.zeros(max_words, dtype=bool)
    for w, frag in enumerate(fragments[:max_words]):
        values[w] = band_power_features(frag, fs, bands, word_index=w).values
        mask[w] = True
    return FeatureSequence(values=values, mask=mask)


# ---------------------------------------------------------------------------
# feature matrix export (u32 rows, u32 cols, float32 LE payload)
# ---------------------------------------------------------------------------


def write_feature_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {matrix.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.astype("<f4").tobytes(order="C"))


def read_feature_matrix(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DataError(f"{path}: truncated feature matrix header")
    rows, cols = struct.unpack("<II", blob[:8])
    expected = 8 + 4 * rows * cols
    if len(blob) != expected:
        raise DataError(
            f"{path}: payload is {len(blob) - 8} bytes, header says {rows}x{cols}"
        )
    return np.frombuffer(blob[8:], dtype="<f4").reshape(rows, cols).astype(np.float64)
