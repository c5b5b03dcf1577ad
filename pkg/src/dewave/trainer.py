"""Loss assembly and the three-stage training regime.

Stage 0 (raw waves): self-supervised reconstruction plus the VQ terms, with
an optional contrastive alignment term against learned text embeddings;
trains the wave front end, codex encoder, codebook, and reconstruction
decoder. Stage 1: text decoding with the decoder language model frozen.
Stage 2: the same objective with every pipeline parameter unfrozen, at a
much smaller learning rate. Plain SGD throughout; the stage-0 learning
rate drops by 10x from the configured decay epoch onward (epochs count
from 1).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor, sgd_step
from .codex import codebook_stats, quantize, straight_through, vq_terms
from .corpus import Sample, normalize_wave, pad_or_clip
from .errors import ConfigError, DataError, NumericError, StateError
from .featurizer import featurize_sample
from .seq2text import RAW_MODE, WORD_MODE, DewaveModel, ModelConfig
from .vectorizers import EmbeddingSequence


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    lr_stage0: float = 5e-4
    lr_stage1: float = 5e-4
    lr_stage2: float = 5e-6
    epochs_stage0: int = 35
    epochs_stage1: int = 35
    epochs_stage2: int = 30
    beta_stage0: float = 0.25
    beta_stage12: float = 0.2
    tau: float = 0.1
    alpha: float = 1.0
    batch_size: int = 1
    seed: int = 0
    decay_epoch_stage0: int = 20
    word_pretrain: bool = False

    def __post_init__(self):
        if self.mode not in (WORD_MODE, RAW_MODE):
            raise ConfigError(f"mode must be {WORD_MODE!r} or {RAW_MODE!r}, got {self.mode!r}")
        for name in ("lr_stage0", "lr_stage1", "lr_stage2", "beta_stage0", "beta_stage12", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("epochs_stage0", "epochs_stage1", "epochs_stage2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class EpochRecord:
    """Per-epoch mean loss components. `contrastive` is the additive piece
    (already alpha-weighted) so the components of one step sum to its total."""

    epoch: int
    nll: float
    codebook: float
    commitment: float
    wave_mse: float
    contrastive: float
    utilization: float
    wall_time_s: float


@dataclass
class TrainReport:
    stage: int
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        """Line-delimited JSON, one record per epoch.

        Wall time is deliberately left out so identical reruns produce
        byte-identical report files.
        """
        lines = []
        for r in self.epochs:
            lines.append(json.dumps({
                "stage": self.stage,
                "epoch": r.epoch,
                "nll": r.nll,
                "codebook": r.codebook,
                "commitment": r.commitment,
                "wave_mse": r.wave_mse,
                "contrastive": r.contrastive,
                "utilization": r.utilization,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PreparedSample:
    """Model-ready arrays for one sample."""

    sample_id: int
    token_ids: np.ndarray
    words: tuple[str, ...]
    features: np.ndarray | None = None   # (max_words, feature_dim), word mode
    feature_mask: np.ndarray | None = None
    wave: np.ndarray | None = None       # (channels, pad_samples), raw mode


def prepare_samples(samples: list[Sample], mcfg: ModelConfig) -> list[PreparedSample]:
    """Featurize (word mode) or normalize+pad (raw mode) once, up front."""
    prepared = []
    for s in samples:
        n_words = len(s.text.words)
        if n_words > mcfg.max_words:
            raise DataError(
                f"sample {s.sample_id} has {n_words} words, model max_words is "
                f"{mcfg.max_words}"
            )
        if s.recording.channels != mcfg.channels:
            raise DataError(
                f"sample {s.sample_id} has {s.recording.channels} channels, model "
                f"expects {mcfg.channels}"
            )
        ids = np.asarray(s.text.ids, dtype=np.int64)
        if mcfg.mode == WORD_MODE:
            fs = featurize_sample(s, max_words=mcfg.max_words)
            prepared.append(PreparedSample(
                sample_id=s.sample_id, token_ids=ids, words=s.text.words,
                features=fs.values, feature_mask=fs.mask))
        else:
            wave = pad_or_clip(normalize_wave(s.recording), mcfg.pad_samples).data
            prepared.append(PreparedSample(
                sample_id=s.sample_id, token_ids=ids, words=s.text.words, wave=wave))
    return prepared


def vectorize(model: DewaveModel, prep: PreparedSample) -> EmbeddingSequence:
    if model.cfg.mode == WORD_MODE:
        return model.vectorizer(prep.features, prep.feature_mask)
    return model.vectorizer(prep.wave)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pool_sequence(seq: EmbeddingSequence, n_bins: int) -> Tensor:
    """Average-pool the valid positions into n_bins equal-width bins (in order)."""
    if n_bins < 1:
        raise DataError(f"n_bins must be >= 1, got {n_bins}")
    valid = np.flatnonzero(seq.mask)
    t = valid.size
    if t == 0:
        raise DataError("cannot pool a fully masked sequence")
    weights = np.zeros((n_bins, seq.length))
    for b in range(n_bins):
        lo = b * t // n_bins
        hi = (b + 1) * t // n_bins
        if hi <= lo:  # more bins than positions: reuse the nearest position
            weights[b, valid[min(lo, t - 1)]] = 1.0
        else:
            weights[b, valid[lo:hi]] = 1.0 / (hi - lo)
    return ad.matmul(Tensor(weights), seq.values)


def loss_contrast(z_q: Tensor, z_t: Tensor, tau: float) -> Tensor:
    """Softmax cross-entropy over pairwise similarities with diagonal positives.

    s[i, j] = z_q[i] . z_t[j]; the loss is the mean over rows of
    -log softmax(s[i] / tau)[i].
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if z_q.shape != z_t.shape or z_q.shape[0] < 1:
        raise DataError(f"contrastive inputs must be equal non-empty (n, m), got "
                        f"{z_q.shape} vs {z_t.shape}")
    n = z_q.shape[0]
    scores = ad.scale(ad.matmul(z_q, ad.transpose(z_t)), 1.0 / tau)
    return ad.cross_entropy(scores, np.arange(n))


def loss_stage12(model: DewaveModel, prep: PreparedSample, beta: float):
    """Text decoding nll plus the two VQ terms. Returns (total, comps, indices)."""
    seq = vectorize(model, prep)
    z_c = model.encode(seq)
    indices, z_q = quantize(z_c, model.codebook)
    st = straight_through(z_c, z_q)
    _, nll, preds = model.decode_teacher_forced(st, prep.token_ids)
    cb_term, commit = vq_terms(z_c, z_q, beta)
    total = ad.add(ad.add(nll, cb_term), commit)
    comps = {
        "total": float(total.data),
        "nll": float(nll.data),
        "codebook": float(cb_term.data),
        "commitment": float(commit.data),
        "wave_mse": 0.0,
        "contrastive": 0.0,
        "preds": preds,
    }
    return total, comps, indices


def loss_wave(model: DewaveModel, prep: PreparedSample, beta: float):
    """Reconstruction MSE plus the two VQ terms (no contrastive piece)."""
    if model.cfg.mode != RAW_MODE:
        raise StateError("wave loss requires raw-wave mode")
    seq = vectorize(model, prep)
    z_c = model.encode(seq)
    indices, z_q = quantize(z_c, model.codebook)
    st = straight_through(z_c, z_q)
    recon = model.reconstruct(st)
    n = min(recon.shape[1], prep.wave.shape[1])
    mse = ad.mean_squared_error(
        ad.slice_(recon, (slice(None), slice(0, n))),
        Tensor(prep.wave[:, :n]))
    cb_term, commit = vq_terms(z_c, z_q, beta)
    total = ad.add(ad.add(mse, cb_term), commit)
    comps = {
        "total": float(total.data),
        "nll": 0.0,
        "codebook": float(cb_term.data),
        "commitment": float(commit.data),
        "wave_mse": float(mse.data),
        "contrastive": 0.0,
    }
    return total, comps, indices, st


def _loss_word_pretrain(model: DewaveModel, prep: PreparedSample, beta: float):
    """Feature-reconstruction analogue of the wave loss for word mode."""
    seq = vectorize(model, prep)
    z_c = model.encode(seq)
    indices, z_q = quantize(z_c, model.codebook)
    st = straight_through(z_c, z_q)
    mask_col = prep.feature_mask.astype(np.float64)[:, None]
    pred = ad.mul(model.word_recon(st.values), Tensor(mask_col))
    target = prep.features * mask_col
    n_valid = int(prep.feature_mask.sum()) * prep.features.shape[1]
    diff = ad.sub(pred, Tensor(target))
    mse = ad.scale(ad.sum_(ad.mul(diff, diff)), 1.0 / n_valid)
    cb_term, commit = vq_terms(z_c, z_q, beta)
    total = ad.add(ad.add(mse, cb_term), commit)
    comps = {
        "total": float(total.data),
        "nll": 0.0,
        "codebook": float(cb_term.data),
        "commitment": float(commit.data),
        "wave_mse": float(mse.data),
        "contrastive": 0.0,
    }
    return total, comps, indices, st


def loss_stage0(model: DewaveModel, prep: PreparedSample, cfg: TrainConfig):
    """Self-supervised total: reconstruction + VQ terms + alpha * contrastive."""
    if model.cfg.mode == RAW_MODE:
        total, comps, indices, st = loss_wave(model, prep, cfg.beta_stage0)
    else:
        total, comps, indices, st = _loss_word_pretrain(model, prep, cfg.beta_stage0)
    if cfg.alpha > 0:
        n_words = len(prep.words)
        pooled = pool_sequence(st, n_words)
        z_t = model.text_embed(prep.token_ids)
        contrast = ad.scale(loss_contrast(pooled, z_t, cfg.tau), cfg.alpha)
        total = ad.add(total, contrast)
        comps = dict(comps)
        comps["contrastive"] = float(contrast.data)
        comps["total"] = float(total.data)
    return total, comps, indices


# ---------------------------------------------------------------------------
# linearized losses for finite-difference checking
# ---------------------------------------------------------------------------
#
# The full losses are not finite-difference checkable as written: the
# nearest-neighbor assignment is piecewise constant and every stop-gradient
# re-captures its value under perturbation, so the numeric derivative probes
# a different function than the one the backward pass differentiates. The
# closures below pin the assignment indices and all stop-gradient captures
# at the current parameters; at that point they equal the real loss and
# their finite differences match the straight-through gradients exactly.


def _frozen_quantization(model: DewaveModel, prep: PreparedSample):
    seq = vectorize(model, prep)
    z_c = model.encode(seq)
    indices, z_q = quantize(z_c, model.codebook)
    zc0 = z_c.values.data.copy()
    zq0 = z_q.values.data.copy()
    mask = z_c.mask.copy()
    n_valid = int(mask.sum())
    return {
        "ids": np.maximum(indices, 0),
        "zc0": zc0,
        "zq0": zq0,
        "jump": zq0 - zc0,
        "mask": mask,
        "mask_col": mask.astype(np.float64)[:, None],
        "n_valid": n_valid,
    }


def _frozen_forward(model: DewaveModel, prep: PreparedSample, frz: dict, beta: float):
    seq = vectorize(model, prep)
    z_c = model.encode(seq)
    st = EmbeddingSequence(values=ad.add(z_c.values, Tensor(frz["jump"])),
                           mask=frz["mask"].copy())
    zq_ent = ad.mul(ad.embedding_lookup(model.codebook.entries, frz["ids"]),
                    Tensor(frz["mask_col"]))
    d_cb = ad.sub(Tensor(frz["zc0"]), zq_ent)
    cb = ad.scale(ad.sum_(ad.mul(d_cb, d_cb)), 1.0 / frz["n_valid"])
    d_cm = ad.sub(z_c.values, Tensor(frz["zq0"]))
    cm = ad.scale(ad.sum_(ad.mul(d_cm, d_cm)), beta / frz["n_valid"])
    return st, ad.add(cb, cm)


def frozen_stage12_loss(model: DewaveModel, prep: PreparedSample, beta: float):
    """Closure over the text-decoding loss with quantization pinned (see above)."""
    frz = _frozen_quantization(model, prep)

    def f() -> Tensor:
        st, vq = _frozen_forward(model, prep, frz, beta)
        _, nll, _ = model.decode_teacher_forced(st, prep.token_ids)
        return ad.add(nll, vq)

    return f


def frozen_stage0_loss(model: DewaveModel, prep: PreparedSample, cfg: TrainConfig):
    """Closure over the self-supervised total with quantization pinned."""
    frz = _frozen_quantization(model, prep)

    def f() -> Tensor:
        st, vq = _frozen_forward(model, prep, frz, cfg.beta_stage0)
        if model.cfg.mode == RAW_MODE:
            recon = model.reconstruct(st)
            n = min(recon.shape[1], prep.wave.shape[1])
            fit = ad.mean_squared_error(
                ad.slice_(recon, (slice(None), slice(0, n))),
                Tensor(prep.wave[:, :n]))
        else:
            mask_col = prep.feature_mask.astype(np.float64)[:, None]
            pred = ad.mul(model.word_recon(st.values), Tensor(mask_col))
            n_valid = int(prep.feature_mask.sum()) * prep.features.shape[1]
            diff = ad.sub(pred, Tensor(prep.features * mask_col))
            fit = ad.scale(ad.sum_(ad.mul(diff, diff)), 1.0 / n_valid)
        total = ad.add(fit, vq)
        if cfg.alpha > 0:
            pooled = pool_sequence(st, len(prep.words))
            z_t = model.text_embed(prep.token_ids)
            total = ad.add(total, ad.scale(loss_contrast(pooled, z_t, cfg.tau), cfg.alpha))
        return total

    return f


# ---------------------------------------------------------------------------
# stage runners
# ---------------------------------------------------------------------------


def _chunks(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _run_epochs(model: DewaveModel, prepared: list[PreparedSample], cfg: TrainConfig,
                stage: int, epochs: int, lr_of_epoch, trainable: ParamSet,
                loss_fn) -> TrainReport:
    if not prepared:
        raise DataError("no samples to train on")
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7000 + stage]))
    report = TrainReport(stage=stage)
    keys = ("nll", "codebook", "commitment", "wave_mse", "contrastive")
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        lr = lr_of_epoch(epoch)
        sums = dict.fromkeys(keys, 0.0)
        epoch_indices = []
        for batch in _chunks(order_rng.permutation(len(prepared)), cfg.batch_size):
            inv = 1.0 / len(batch)
            for i in batch:
                total, comps, indices = loss_fn(prepared[int(i)])
                if not np.isfinite(comps["total"]):
                    raise NumericError(
                        f"non-finite loss at stage {stage}, epoch {epoch}, "
                        f"sample {prepared[int(i)].sample_id}"
                    )
                ad.scale(total, inv).backward()
                for k in keys:
                    sums[k] += comps[k]
                epoch_indices.append(indices)
            sgd_step(trainable, lr)
        _, utilization, _ = codebook_stats(np.concatenate(epoch_indices),
                                           model.cfg.codebook_size)
        n = len(prepared)
        report.epochs.append(EpochRecord(
            epoch=epoch,
            nll=sums["nll"] / n,
            codebook=sums["codebook"] / n,
            commitment=sums["commitment"] / n,
            wave_mse=sums["wave_mse"] / n,
            contrastive=sums["contrastive"] / n,
            utilization=utilization,
            wall_time_s=time.perf_counter() - t0,
        ))
    return report


def _stage0_trainable(model: DewaveModel, cfg: TrainConfig) -> ParamSet:
    prefixes = ["vectorizer", "encoder", "codebook", "recon"]
    if cfg.alpha > 0:
        prefixes.append("text_embed")
    return model.params.subset(prefixes)


def pretrain_stage0(samples: list[Sample], cfg: TrainConfig,
                    model: DewaveModel) -> TrainReport:
    """Self-supervised initialization of the vectorizer, encoder, and codebook."""
    if model.cfg.mode == WORD_MODE and not (cfg.word_pretrain and model.cfg.word_pretrain):
        raise StateError("stage-0 pretraining on word-level features requires the "
                         "word_pretrain flag")
    prepared = prepare_samples(samples, model.cfg)

    def lr_of_epoch(epoch: int) -> float:
        if epoch >= cfg.decay_epoch_stage0:
            return cfg.lr_stage0 * 0.1
        return cfg.lr_stage0

    return _run_epochs(
        model, prepared, cfg, stage=0, epochs=cfg.epochs_stage0,
        lr_of_epoch=lr_of_epoch, trainable=_stage0_trainable(model, cfg),
        loss_fn=lambda p: loss_stage0(model, p, cfg))


def train_stage1(samples: list[Sample], cfg: TrainConfig,
                 model: DewaveModel) -> TrainReport:
    """Codex training with the decoder language model frozen bit-for-bit."""
    prepared = prepare_samples(samples, model.cfg)
    decoder_params = model.params.subset(["decoder"])
    trainable = model.params.subset(["vectorizer", "encoder", "codebook"])
    for t in decoder_params.tensors():
        t.requires_grad = False
    try:
        return _run_epochs(
            model, prepared, cfg, stage=1, epochs=cfg.epochs_stage1,
            lr_of_epoch=lambda _: cfg.lr_stage1, trainable=trainable,
            loss_fn=lambda p: loss_stage12(model, p, cfg.beta_stage12))
    finally:
        for t in decoder_params.tensors():
            t.requires_grad = True
            t.grad = None


def train_stage2(samples: list[Sample], cfg: TrainConfig,
                 model: DewaveModel) -> TrainReport:
    """Fine-tune everything in the decoding path, decoder included."""
    prepared = prepare_samples(samples, model.cfg)
    trainable = model.params.subset(["vectorizer", "encoder", "codebook", "decoder"])
    return _run_epochs(
        model, prepared, cfg, stage=2, epochs=cfg.epochs_stage2,
        lr_of_epoch=lambda _: cfg.lr_stage2, trainable=trainable,
        loss_fn=lambda p: loss_stage12(model, p, cfg.beta_stage12))
