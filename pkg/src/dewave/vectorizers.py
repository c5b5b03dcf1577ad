"""Turning EEG into embedding sequences.

Two routes produce the same (T, dim) shape:

  * WaveEncoder: a 1x1 channel-fusion convolution, then a strided temporal
    conv stack (valid convolutions, no padding), then learned positional
    embeddings and one bidirectional attention layer.
  * WordProjector: per-word band-power features through layer norm and a
    linear map to the embedding dim, then positional embeddings and one
    attention layer. Padded positions stay zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .autodiff import ParamSet, Tensor
from .errors import ConfigError, DataError, ShapeError


@dataclass(frozen=True)
class ConvSchedule:
    kernels: tuple[int, ...] = (10, 3, 3, 3, 2)
    strides: tuple[int, ...] = (3, 2, 2, 2, 2)

    def __post_init__(self):
        if not self.kernels or len(self.kernels) != len(self.strides):
            raise ConfigError(
                f"kernels and strides must be equal-length and non-empty, got "
                f"{self.kernels} / {self.strides}"
            )
        for k, s in zip(self.kernels, self.strides):
            if not (k >= s >= 1):
                raise ConfigError(f"need kernel >= stride >= 1, got k={k}, s={s}")


@dataclass(frozen=True)
class EmbeddingSequence:
    """Length-T sequence of dim-m vectors with a validity mask."""

    values: Tensor          # (T, m)
    mask: np.ndarray        # (T,) bool; masked rows of values are zero

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())


def out_length(length: int, sched: ConvSchedule) -> int:
    """Composed per-layer floor((L - k) / s) + 1."""
    for k, s in zip(sched.kernels, sched.strides):
        if length < k:
            raise DataError(f"input length {length} shorter than kernel {k}")
        length = (length - k) // s + 1
    return length


def receptive_field(sched: ConvSchedule, fs: float) -> tuple[int, int, float, float]:
    """(rf_samples, hop_samples, rf_ms, hop_ms) for one output position."""
    rf = 1
    for k, s in zip(reversed(sched.kernels), reversed(sched.strides)):
        rf = (rf - 1) * s + k
    hop = math.prod(sched.strides)
    return rf, hop, rf / fs * 1000.0, hop / fs * 1000.0


class WaveEncoder:
    """Raw-wave front end: channel fusion, temporal conv stack, attention."""

    def __init__(self, ps: ParamSet, name: str, channels: int, dim: int, heads: int,
                 sched: ConvSchedule, max_positions: int, rng: np.random.Generator):
        self.sched = sched
        self.channels = channels
        self.dim = dim
        self.fuse_w = ps.add(f"{name}.fuse.w", nn.kaiming_uniform(rng, (dim, channels, 1), channels))
        self.fuse_b = ps.add(f"{name}.fuse.b", np.zeros(dim))
        self.conv_w, self.conv_b, self.conv_ln = [], [], []
        for i, k in enumerate(sched.kernels):
            self.conv_w.append(ps.add(f"{name}.conv{i}.w",
                                      nn.kaiming_uniform(rng, (dim, dim, k), dim * k)))
            self.conv_b.append(ps.add(f"{name}.conv{i}.b", np.zeros(dim)))
            self.conv_ln.append(nn.LayerNorm(ps, f"{name}.conv{i}.ln", dim))
        self.pos = ps.add(f"{name}.pos", nn.fan_in_uniform(rng, (max_positions, dim), dim))
        self.attn_layer = nn.EncoderLayer(ps, f"{name}.attn", dim, heads, rng)

    def conv_features(self, wave: np.ndarray) -> Tensor:
        """Pre-attention (T, dim) features; shift-equivariant by one hop."""
        wave = np.asarray(wave, dtype=np.float64)
        if wave.ndim != 2 or wave.shape[0] != self.channels:
            raise ShapeError(
                f"wave must be ({self.channels}, L), got shape {wave.shape}"
            )
        rf, _, _, _ = receptive_field(self.sched, 1.0)
        if wave.shape[1] < rf:
            raise DataError(
                f"wave of {wave.shape[1]} samples is shorter than the receptive "
                f"field of {rf}"
            )
        x = ad.gelu(ad.conv1d(Tensor(wave), self.fuse_w, self.fuse_b, stride=1))
        for w, b, ln, s in zip(self.conv_w, self.conv_b, self.conv_ln, self.sched.strides):
            x = ad.conv1d(x, w, b, stride=s)
            x = ad.transpose(x)          # (L, dim) for per-position layer norm
            x = ad.gelu(ln(x))
            x = ad.transpose(x)
        return ad.transpose(x)

    def __call__(self, wave: np.ndarray) -> EmbeddingSequence:
        feats = self.conv_features(wave)
        t = feats.shape[0]
        if t > self.pos.shape[0]:
            raise DataError(
                f"sequence of {t} positions exceeds the positional table of "
                f"{self.pos.shape[0]}"
            )
        mask = np.ones(t, dtype=bool)
        x = ad.add(feats, ad.slice_(self.pos, (slice(0, t), slice(None))))
        x = self.attn_layer(x, mask)
        return EmbeddingSequence(values=x, mask=mask)


class WordProjector:
    """Band-power features to embedding sequences of the codex dimension."""

    def __init__(self, ps: ParamSet, name: str, feature_dim: int, dim: int, heads: int,
                 max_positions: int, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.in_ln = nn.LayerNorm(ps, f"{name}.in_ln", feature_dim)
        self.proj = nn.Linear(ps, f"{name}.proj", feature_dim, dim, rng)
        self.pos = ps.add(f"{name}.pos", nn.fan_in_uniform(rng, (max_positions, dim), dim))
        self.attn_layer = nn.EncoderLayer(ps, f"{name}.attn", dim, heads, rng)

    def __call__(self, features: np.ndarray, mask: np.ndarray) -> EmbeddingSequence:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ShapeError(
                f"features must be (T, {self.feature_dim}), got shape {features.shape}"
            )
        t = features.shape[0]
        if t > self.pos.shape[0]:
            raise DataError(
                f"sequence of {t} positions exceeds the positional table of "
                f"{self.pos.shape[0]}"
            )
        x = nn.mask_rows(self.proj(self.in_ln(Tensor(features))), mask)
        x = ad.add(x, nn.mask_rows(ad.slice_(self.pos, (slice(0, t), slice(None))), mask))
        x = self.attn_layer(x, mask)
        return EmbeddingSequence(values=x, mask=mask.copy())
