"""The sequence model: codex transformer encoder, a small trainable decoder
language model (causal self-attention + cross-attention over the quantized
sequence), a wave reconstruction decoder, and a learned text embedding table
for contrastive alignment.

`DewaveModel` wires these together with the mode-specific vectorizer and the
codebook, owns the single ParamSet, and (de)serializes checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import layers as nn
from .autodiff import ParamSet, Tensor
from .codex import Codebook
from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .errors import ConfigError, DataError, ShapeError, StateError
from .vectorizers import ConvSchedule, EmbeddingSequence, WaveEncoder, WordProjector, out_length

WORD_MODE = "word-level"
RAW_MODE = "raw-wave"
MODES = (WORD_MODE, RAW_MODE)


@dataclass(frozen=True)
class ModelConfig:
    mode: str
    vocab_size: int
    channels: int = 105
    dim: int = 512
    heads: int = 8
    encoder_layers: int = 6
    decoder_layers: int = 2
    recon_layers: int = 6
    codebook_size: int = 2048
    max_words: int = 56
    pad_samples: int = 5500
    kernels: tuple[int, ...] = (10, 3, 3, 3, 2)
    strides: tuple[int, ...] = (3, 2, 2, 2, 2)
    recon_kernels: tuple[int, ...] = (3, 3, 3)
    recon_strides: tuple[int, ...] = (2, 2, 3)
    recon_final_kernel: int = 3
    recon_final_stride: int = 2
    word_pretrain: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must cover the special tokens, got {self.vocab_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name in ("channels", "dim", "heads", "encoder_layers", "decoder_layers",
                     "recon_layers", "codebook_size", "max_words", "pad_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def schedule(self) -> ConvSchedule:
        return ConvSchedule(kernels=tuple(self.kernels), strides=tuple(self.strides))

    @property
    def feature_dim(self) -> int:
        return self.channels * 8  # 4 bands x 2 stats per channel

    @property
    def has_contrastive(self) -> bool:
        return self.mode == RAW_MODE or self.word_pretrain


class EncoderStack:
    """Bidirectional transformer over embedding sequences; emits z_c."""

    def __init__(self, ps: ParamSet, name: str, dim: int, heads: int, n_layers: int,
                 max_positions: int, rng: np.random.Generator):
        self.pos = ps.add(f"{name}.pos", nn.fan_in_uniform(rng, (max_positions, dim), dim))
        self.layers = [nn.EncoderLayer(ps, f"{name}.layer{i}", dim, heads, rng)
                       for i in range(n_layers)]
        # gain sized so fresh outputs land at the codebook's init scale
        self.out_ln = nn.LayerNorm(ps, f"{name}.out_ln", dim,
                                   gain_init=1.0 / np.sqrt(3.0 * dim))
        self.dim = dim

    def __call__(self, seq: EmbeddingSequence) -> EmbeddingSequence:
        if seq.dim != self.dim:
            raise ShapeError(f"encoder: input dim {seq.dim}, expected {self.dim}")
        t = seq.length
        if t > self.pos.shape[0]:
            raise DataError(
                f"sequence of {t} positions exceeds the positional table of "
                f"{self.pos.shape[0]}"
            )
        mask = seq.mask
        x = ad.add(seq.values, nn.mask_rows(ad.slice_(self.pos, (slice(0, t), slice(None))), mask))
        for layer in self.layers:
            x = layer(x, mask)
        x = nn.mask_rows(self.out_ln(x), mask)
        return EmbeddingSequence(values=x, mask=mask.copy())


class DecoderLM:
    """Token-level causal decoder with cross-attention over the codex sequence."""

    def __init__(self, ps: ParamSet, name: str, vocab_size: int, dim: int, heads: int,
                 n_layers: int, max_positions: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.tok = nn.Embedding(ps, f"{name}.tok", vocab_size, dim, rng)
        self.pos = ps.add(f"{name}.pos", nn.fan_in_uniform(rng, (max_positions, dim), dim))
        self.layers = [nn.DecoderLayer(ps, f"{name}.layer{i}", dim, heads, rng)
                       for i in range(n_layers)]
        self.out_ln = nn.LayerNorm(ps, f"{name}.out_ln", dim)
        self.out_proj = nn.Linear(ps, f"{name}.out", dim, vocab_size, rng)

    def logits(self, input_ids: np.ndarray, memory: EmbeddingSequence) -> Tensor:
        n = len(input_ids)
        if n > self.pos.shape[0]:
            raise DataError(
                f"token sequence of {n} exceeds the positional table of {self.pos.shape[0]}"
            )
        x = ad.add(self.tok(input_ids), ad.slice_(self.pos, (slice(0, n), slice(None))))
        for layer in self.layers:
            x = layer(x, memory.values, memory.mask)
        return self.out_proj(self.out_ln(x))


class ReconDecoder:
    """Codex transformer plus transposed convolutions back to wave space."""

    def __init__(self, ps: ParamSet, name: str, channels: int, dim: int, heads: int,
                 n_layers: int, kernels, strides, final_kernel: int, final_stride: int,
                 max_positions: int, rng: np.random.Generator):
        self.pos = ps.add(f"{name}.pos", nn.fan_in_uniform(rng, (max_positions, dim), dim))
        self.layers = [nn.EncoderLayer(ps, f"{name}.layer{i}", dim, heads, rng)
                       for i in range(n_layers)]
        self.kernels = tuple(kernels)
        self.strides = tuple(strides)
        self.final_kernel = final_kernel
        self.final_stride = final_stride
        self.up_w, self.up_b, self.up_ln = [], [], []
        for i, k in enumerate(self.kernels):
            self.up_w.append(ps.add(f"{name}.up{i}.w",
                                    nn.kaiming_uniform(rng, (dim, dim, k), dim * k)))
            self.up_b.append(ps.add(f"{name}.up{i}.b", np.zeros(dim)))
            self.up_ln.append(nn.LayerNorm(ps, f"{name}.up{i}.ln", dim))
        self.final_w = ps.add(f"{name}.final.w",
                              nn.kaiming_uniform(rng, (dim, channels, final_kernel),
                                                dim * final_kernel))
        self.final_b = ps.add(f"{name}.final.b", np.zeros(channels))

    def __call__(self, seq: EmbeddingSequence) -> Tensor:
        t = seq.length
        if t > self.pos.shape[0]:
            raise DataError(
                f"sequence of {t} positions exceeds the positional table of "
                f"{self.pos.shape[0]}"
            )
        mask = seq.mask
        x = ad.add(seq.values, nn.mask_rows(ad.slice_(self.pos, (slice(0, t), slice(None))), mask))
        for layer in self.layers:
            x = layer(x, mask)
        x = ad.transpose(x)  # (dim, T)
        for w, b, ln, s in zip(self.up_w, self.up_b, self.up_ln, self.strides):
            x = ad.transpose_conv1d(x, w, b, stride=s)
            x = ad.transpose(x)
            x = ad.gelu(ln(x))
            x = ad.transpose(x)
        return ad.transpose_conv1d(x, self.final_w, self.final_b, stride=self.final_stride)


def recon_output_length(t: int, cfg: ModelConfig) -> int:
    for k, s in zip(cfg.recon_kernels, cfg.recon_strides):
        t = (t - 1) * s + k
    return (t - 1) * cfg.recon_final_stride + cfg.recon_final_kernel


class DewaveModel:
    """Full pipeline: vectorize, encode, quantize, decode (and reconstruct)."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.params = ParamSet()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD37A]))

        if cfg.mode == WORD_MODE:
            self.enc_positions = cfg.max_words
            self.vectorizer = WordProjector(
                self.params, "vectorizer", cfg.feature_dim, cfg.dim, cfg.heads,
                self.enc_positions, rng)
        else:
            self.enc_positions = out_length(cfg.pad_samples, cfg.schedule)
            self.vectorizer = WaveEncoder(
                self.params, "vectorizer", cfg.channels, cfg.dim, cfg.heads,
                cfg.schedule, self.enc_positions, rng)

        self.encoder = EncoderStack(self.params, "encoder", cfg.dim, cfg.heads,
                                    cfg.encoder_layers, self.enc_positions, rng)
        self.codebook = Codebook(self.params, "codebook", cfg.codebook_size, cfg.dim, rng)
        self.decoder = DecoderLM(self.params, "decoder", cfg.vocab_size, cfg.dim,
                                 cfg.heads, cfg.decoder_layers, cfg.max_words + 2, rng)

        self.recon: ReconDecoder | None = None
        self.word_recon: nn.Linear | None = None
        self.text_table: Tensor | None = None
        if cfg.mode == RAW_MODE:
            self.recon = ReconDecoder(
                self.params, "recon", cfg.channels, cfg.dim, cfg.heads, cfg.recon_layers,
                cfg.recon_kernels, cfg.recon_strides, cfg.recon_final_kernel,
                cfg.recon_final_stride, self.enc_positions, rng)
        elif cfg.word_pretrain:
            self.word_recon = nn.Linear(self.params, "recon.word", cfg.dim,
                                        cfg.feature_dim, rng)
        if cfg.has_contrastive:
            self.text_table = self.params.add(
                "text_embed.table",
                nn.fan_in_uniform(rng, (cfg.vocab_size, cfg.dim), cfg.dim))

    # -- forward pieces --------------------------------------------------

    def encode(self, seq: EmbeddingSequence) -> EmbeddingSequence:
        return self.encoder(seq)

    def decode_teacher_forced(self, memory: EmbeddingSequence,
                              token_ids) -> tuple[Tensor, Tensor, np.ndarray]:
        """(logits, nll, argmax predictions) for gold-prefix decoding.

        Position t sees gold tokens < t; nll is the mean cross-entropy over
        non-PAD targets.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size < 2:
            raise DataError("teacher forcing needs at least BOS plus one target token")
        if ids[0] != BOS_ID:
            raise DataError("target sequence must begin with BOS")
        inputs, targets = ids[:-1], ids[1:]
        logits = self.decoder.logits(inputs, memory)
        weights = (targets != PAD_ID).astype(np.float64)
        nll = ad.cross_entropy(logits, targets, weights)
        preds = logits.data.argmax(axis=1)
        return logits, nll, preds

    def generate(self, memory: EmbeddingSequence, max_len: int) -> list[int]:
        """Greedy decode from BOS until EOS or `max_len` generated tokens."""
        if max_len < 1:
            raise DataError(f"max_len must be >= 1, got {max_len}")
        cap = min(max_len, self.decoder.pos.shape[0] - 1)
        ids = [BOS_ID]
        for _ in range(cap):
            logits = self.decoder.logits(np.asarray(ids, dtype=np.int64), memory)
            nxt = int(logits.data[-1].argmax())
            ids.append(nxt)
            if nxt == EOS_ID:
                break
        return ids

    def reconstruct(self, memory: EmbeddingSequence) -> Tensor:
        if self.recon is None:
            raise StateError("wave reconstruction is only available in raw-wave mode")
        return self.recon(memory)

    def text_embed(self, token_ids) -> Tensor:
        """One embedding per non-special token, from the alignment table."""
        if self.text_table is None:
            raise StateError("this model has no text embedding table")
        ids = np.asarray(token_ids, dtype=np.int64)
        content = ids[ids > UNK_ID]
        if content.size == 0:
            raise DataError("no non-special tokens to embed")
        return ad.embedding_lookup(self.text_table, content)

    # -- checkpointing -----------------------------------------------------

    def checkpoint_tensors(self, stage: int) -> dict[str, np.ndarray]:
        cfg = self.cfg
        meta: dict[str, np.ndarray] = {
            "meta.version": np.float64(1),
            "meta.stage": np.float64(stage),
            "meta.seed": np.float64(self.seed),
            "meta.mode": np.float64(0 if cfg.mode == WORD_MODE else 1),
            "meta.vocab_size": np.float64(cfg.vocab_size),
            "meta.channels": np.float64(cfg.channels),
            "meta.dim": np.float64(cfg.dim),
            "meta.heads": np.float64(cfg.heads),
            "meta.encoder_layers": np.float64(cfg.encoder_layers),
            "meta.decoder_layers": np.float64(cfg.decoder_layers),
            "meta.recon_layers": np.float64(cfg.recon_layers),
            "meta.codebook_size": np.float64(cfg.codebook_size),
            "meta.max_words": np.float64(cfg.max_words),
            "meta.pad_samples": np.float64(cfg.pad_samples),
            "meta.word_pretrain": np.float64(1 if cfg.word_pretrain else 0),
            "meta.kernels": np.asarray(cfg.kernels, dtype=np.float64),
            "meta.strides": np.asarray(cfg.strides, dtype=np.float64),
            "meta.recon_kernels": np.asarray(cfg.recon_kernels, dtype=np.float64),
            "meta.recon_strides": np.asarray(cfg.recon_strides, dtype=np.float64),
            "meta.recon_final": np.asarray(
                [cfg.recon_final_kernel, cfg.recon_final_stride], dtype=np.float64),
        }
        meta.update(self.params.state())
        return meta

    def save(self, path, stage: int) -> None:
        ad.save_checkpoint(path, self.checkpoint_tensors(stage))

    @classmethod
    def load(cls, path) -> tuple["DewaveModel", int]:
        blob = ad.load_checkpoint(path)
        try:
            def scalar(name):
                return float(blob.pop(name))

            version = scalar("meta.version")
            if version != 1:
                raise StateError(f"unsupported checkpoint version {version}")
            stage = int(scalar("meta.stage"))
            seed = int(scalar("meta.seed"))
            mode = WORD_MODE if scalar("meta.mode") == 0 else RAW_MODE
            final = blob.pop("meta.recon_final")
            cfg = ModelConfig(
                mode=mode,
                vocab_size=int(scalar("meta.vocab_size")),
                channels=int(scalar("meta.channels")),
                dim=int(scalar("meta.dim")),
                heads=int(scalar("meta.heads")),
                encoder_layers=int(scalar("meta.encoder_layers")),
                decoder_layers=int(scalar("meta.decoder_layers")),
                recon_layers=int(scalar("meta.recon_layers")),
                codebook_size=int(scalar("meta.codebook_size")),
                max_words=int(scalar("meta.max_words")),
                pad_samples=int(scalar("meta.pad_samples")),
                word_pretrain=bool(scalar("meta.word_pretrain")),
                kernels=tuple(int(v) for v in blob.pop("meta.kernels")),
                strides=tuple(int(v) for v in blob.pop("meta.strides")),
                recon_kernels=tuple(int(v) for v in blob.pop("meta.recon_kernels")),
                recon_strides=tuple(int(v) for v in blob.pop("meta.recon_strides")),
                recon_final_kernel=int(final[0]),
                recon_final_stride=int(final[1]),
            )
        except KeyError as exc:
            raise StateError(f"checkpoint is missing metadata field {exc}") from exc
        model = cls(cfg, seed=seed)
        model.params.load_state(blob)
        return model, stage
