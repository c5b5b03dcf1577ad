"""Model building blocks: linear maps, layer norm, attention, transformer layers.

All blocks register their parameters into a shared ParamSet under a dotted
name prefix at construction time, which fixes the checkpoint ordering.
Sequences are (T, dim) matrices; masks are boolean (T,) arrays where False
marks padding. Masked positions are forced to zero at the end of every
block so they can never leak through residual paths.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import ShapeError

MASK_BIAS = -1e9


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Variance-preserving init for the strided conv stacks.

    The narrower fan-in bound shrinks activation variance roughly 3x per
    conv layer; the per-layer norms then re-amplify gradients by the same
    factor, which compounds across the stack into unstable curvature.
    """
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def mask_rows(seq: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out rows where mask is False."""
    col = mask.astype(np.float64)[:, None]
    return ad.mul(seq, Tensor(col))


def key_bias(mask: np.ndarray) -> Tensor:
    """Additive attention bias that hides masked key positions."""
    return Tensor(np.where(mask, 0.0, MASK_BIAS)[None, :])


def causal_bias(n: int) -> Tensor:
    """Additive bias letting position t attend to positions <= t."""
    return Tensor(np.triu(np.full((n, n), MASK_BIAS), k=1))


class Linear:
    def __init__(self, ps: ParamSet, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True):
        self.d_in = d_in
        self.w = ps.add(f"{name}.w", fan_in_uniform(rng, (d_in, d_out), d_in))
        self.b = ps.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear: input dim {x.shape[-1]}, expected {self.d_in}")
        out = ad.matmul(x, self.w)
        return ad.add(out, self.b) if self.b is not None else out


class LayerNorm:
    def __init__(self, ps: ParamSet, name: str, dim: int, gain_init: float = 1.0):
        self.gain = ps.add(f"{name}.gain", np.full(dim, gain_init))
        self.bias = ps.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class Embedding:
    def __init__(self, ps: ParamSet, name: str, rows: int, dim: int,
                 rng: np.random.Generator):
        self.table = ps.add(f"{name}.table", fan_in_uniform(rng, (rows, dim), dim))

    def __call__(self, ids) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


class MultiHeadAttention:
    """Scaled dot-product attention with per-head slicing."""

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"attention: dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(ps, f"{name}.wq", dim, dim, rng)
        self.wk = Linear(ps, f"{name}.wk", dim, dim, rng)
        self.wv = Linear(ps, f"{name}.wv", dim, dim, rng)
        self.wo = Linear(ps, f"{name}.wo", dim, dim, rng)

    def __call__(self, q_seq: Tensor, kv_seq: Tensor, bias: Tensor | None = None) -> Tensor:
        q = self.wq(q_seq)
        k = self.wk(kv_seq)
        v = self.wv(kv_seq)
        inv = 1.0 / np.sqrt(self.head_dim)
        outs = []
        for h in range(self.heads):
            sl = (slice(None), slice(h * self.head_dim, (h + 1) * self.head_dim))
            qh, kh, vh = ad.slice_(q, sl), ad.slice_(k, sl), ad.slice_(v, sl)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv)
            if bias is not None:
                scores = ad.add(scores, bias)
            outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
        return self.wo(ad.concat(outs, axis=1))


class FeedForward:
    def __init__(self, ps: ParamSet, name: str, dim: int, hidden: int,
                 rng: np.random.Generator):
        self.up = Linear(ps, f"{name}.up", dim, hidden, rng)
        self.down = Linear(ps, f"{name}.down", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.gelu(self.up(x)))


class EncoderLayer:
    """Pre-norm bidirectional self-attention + feed-forward block."""

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int,
                 rng: np.random.Generator, ff_mult: int = 4):
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(ps, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.ff = FeedForward(ps, f"{name}.ff", dim, dim * ff_mult, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        bias = key_bias(mask)
        h = self.ln1(x)
        x = ad.add(x, mask_rows(self.attn(h, h, bias), mask))
        x = ad.add(x, mask_rows(self.ff(self.ln2(x)), mask))
        return x


class DecoderLayer:
    """Pre-norm causal self-attention, cross-attention over memory, feed-forward.

    The memory is layer-normalized before cross-attention so the decoder's
    sensitivity does not depend on the scale of the quantized codes.
    """

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int,
                 rng: np.random.Generator, ff_mult: int = 4):
        self.ln1 = LayerNorm(ps, f"{name}.ln1", dim)
        self.self_attn = MultiHeadAttention(ps, f"{name}.self", dim, heads, rng)
        self.ln2 = LayerNorm(ps, f"{name}.ln2", dim)
        self.mem_ln = LayerNorm(ps, f"{name}.mem_ln", dim)
        self.cross_attn = MultiHeadAttention(ps, f"{name}.cross", dim, heads, rng)
        self.ln3 = LayerNorm(ps, f"{name}.ln3", dim)
        self.ff = FeedForward(ps, f"{name}.ff", dim, dim * ff_mult, rng)

    def __call__(self, x: Tensor, memory: Tensor, memory_mask: np.ndarray) -> Tensor:
        n = x.shape[0]
        h = self.ln1(x)
        x = ad.add(x, self.self_attn(h, h, causal_bias(n)))
        mem = self.mem_ln(memory)
        x = ad.add(x, self.cross_attn(self.ln2(x), mem, key_bias(memory_mask)))
        x = ad.add(x, self.ff(self.ln3(x)))
        return x
