"""Discrete codebook: nearest-neighbor quantization, the two VQ loss terms,
the straight-through estimator, and usage statistics.

Quantization snaps each valid sequence position to its nearest codebook
entry by Euclidean distance (ties go to the lowest index). Gradients are
routed so that the codebook term trains only the entries and the
commitment term trains only the encoder; the straight-through estimator
carries decoder gradients past the argmin onto the encoder output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ConfigError, DataError, ShapeError
from .vectorizers import EmbeddingSequence


class Codebook:
    """k x m table of codex vectors."""

    def __init__(self, ps: ParamSet, name: str, k: int, m: int, rng: np.random.Generator):
        if k < 2:
            raise ConfigError(f"codebook needs at least 2 entries, got {k}")
        self.k = k
        self.m = m
        bound = 1.0 / np.sqrt(m)
        self.entries = ps.add(f"{name}.entries", rng.uniform(-bound, bound, size=(k, m)))


def quantize(z_c: EmbeddingSequence, cb: Codebook) -> tuple[np.ndarray, EmbeddingSequence]:
    """Nearest codebook entry per valid position.

    Returns (indices, z_q): masked positions get index -1 and a zero
    vector; z_q is differentiable with respect to the codebook entries.
    """
    if z_c.dim != cb.m:
        raise ShapeError(f"quantize: sequence dim {z_c.dim} vs codebook dim {cb.m}")
    z = z_c.values.data
    entries = cb.entries.data
    # ||z - c||^2 = ||z||^2 - 2 z.c + ||c||^2, argmin row-wise (ties -> lowest index)
    d2 = (z * z).sum(axis=1, keepdims=True) - 2.0 * (z @ entries.T) + (entries * entries).sum(axis=1)
    indices = d2.argmin(axis=1)
    indices[~z_c.mask] = -1

    lookup = ad.embedding_lookup(cb.entries, np.maximum(indices, 0))
    values = ad.mul(lookup, Tensor(z_c.mask.astype(np.float64)[:, None]))
    return indices, EmbeddingSequence(values=values, mask=z_c.mask.copy())


def vq_terms(z_c: EmbeddingSequence, z_q: EmbeddingSequence, beta: float) -> tuple[Tensor, Tensor]:
    """(codebook_term, commitment_term) of the quantization loss.

    Each term is the mean over valid positions of the squared Euclidean
    distance; stop-gradients make the first term train only the codebook
    entries and the second only the encoder. The commitment term carries
    the beta factor.
    """
    if z_c.values.shape != z_q.values.shape:
        raise ShapeError(
            f"vq_terms: shapes {z_c.values.shape} vs {z_q.values.shape}"
        )
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    n_valid = z_c.valid_count
    if n_valid == 0:
        raise DataError("vq_terms: no valid positions")
    scale = 1.0 / n_valid

    diff_cb = ad.sub(ad.stop_gradient(z_c.values), z_q.values)
    codebook_term = ad.scale(ad.sum_(ad.mul(diff_cb, diff_cb)), scale)
    diff_commit = ad.sub(z_c.values, ad.stop_gradient(z_q.values))
    commitment_term = ad.scale(ad.sum_(ad.mul(diff_commit, diff_commit)), beta * scale)
    return codebook_term, commitment_term


def straight_through(z_c: EmbeddingSequence, z_q: EmbeddingSequence) -> EmbeddingSequence:
    """Forward z_q, backward identity onto z_c: z_c + sg(z_q - z_c)."""
    if z_c.values.shape != z_q.values.shape:
        raise ShapeError(
            f"straight_through: shapes {z_c.values.shape} vs {z_q.values.shape}"
        )
    values = ad.add(z_c.values, ad.stop_gradient(ad.sub(z_q.values, z_c.values)))
    return EmbeddingSequence(values=values, mask=z_c.mask.copy())


def codebook_stats(indices: np.ndarray, k: int) -> tuple[np.ndarray, float, float]:
    """(usage histogram, utilization fraction, perplexity) of an index stream.

    Indices of -1 (masked positions) are ignored. Perplexity is the exp of
    the entropy of the empirical index distribution.
    """
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.size and indices.max() >= k:
        raise DataError(f"codebook index {indices.max()} out of range [0, {k})")
    if indices.size and indices.min() < -1:
        raise DataError(f"codebook index {indices.min()} out of range [0, {k})")
    valid = indices[indices >= 0]
    hist = np.bincount(valid, minlength=k).astype(np.int64)
    total = hist.sum()
    if total == 0:
        return hist, 0.0, 0.0
    utilization = float((hist > 0).sum()) / k
    p = hist[hist > 0] / total
    perplexity = float(np.exp(-(p * np.log(p)).sum()))
    return hist, utilization, perplexity


# ---------------------------------------------------------------------------
# codebook dump (u32 k, u32 m header, float32 LE payload)
# ---------------------------------------------------------------------------


def dump_codebook(path, entries: np.ndarray) -> None:
    entries = np.asarray(entries)
    if entries.ndim != 2:
        raise DataError(f"codebook must be 2-D, got shape {entries.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", entries.shape[0], entries.shape[1]))
        fh.write(entries.astype("<f4").tobytes(order="C"))


def read_codebook_dump(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DataError(f"{path}: truncated codebook header")
    k, m = struct.unpack("<II", blob[:8])
    expected = 8 + 4 * k * m
    if len(blob) != expected:
        raise DataError(f"{path}: payload is {len(blob) - 8} bytes, header says {k}x{m}")
    return np.frombuffer(blob[8:], dtype="<f4").reshape(k, m).astype(np.float64)
