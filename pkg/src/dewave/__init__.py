"""EEG-to-text translation through a discrete wave codex."""

from .corpus import (
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
    synth_corpus,
)
from .seq2text import RAW_MODE, WORD_MODE, DewaveModel, ModelConfig
from .trainer import TrainConfig, pretrain_stage0, train_stage1, train_stage2
from .metrics import EvalResult, bleu, evaluate_checkpoint, evaluate_model, rouge1

__all__ = [
    "EEGRecording", "FixationSpan", "Sample", "SynthConfig", "TokenSequence",
    "Vocabulary", "build_vocabulary", "load_dataset", "normalize_wave",
    "pad_or_clip", "save_dataset", "slice_by_fixations", "synth_corpus",
    "RAW_MODE", "WORD_MODE", "DewaveModel", "ModelConfig",
    "TrainConfig", "pretrain_stage0", "train_stage1", "train_stage2",
    "EvalResult", "bleu", "evaluate_checkpoint", "evaluate_model", "rouge1",
]
