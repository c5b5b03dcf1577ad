"""Corpus BLEU-N and ROUGE-1, and checkpoint evaluation.

BLEU is the cumulative corpus variant: modified n-gram precisions with
reference clipping summed over the corpus, a uniform-weight geometric mean
over orders 1..N, and the brevity penalty exp(1 - r/c) for c <= r. No
smoothing: any zero precision zeroes the score. ROUGE-1 is computed per
sentence from clipped unigram overlap and averaged arithmetically.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .codex import quantize, straight_through
from .corpus import BOS_ID, EOS_ID, PAD_ID, Sample, Vocabulary, build_vocabulary, load_dataset
from .errors import DataError, StateError
from .seq2text import WORD_MODE, DewaveModel
from .trainer import PreparedSample, prepare_samples, vectorize

_STRIP_IDS = (PAD_ID, BOS_ID, EOS_ID)


@dataclass(frozen=True)
class EvalResult:
    bleu: tuple[float, float, float, float]   # BLEU-1..4
    rouge_recall: float
    rouge_precision: float
    rouge_f1: float
    token_accuracy: float | None              # teacher-forced runs only
    sentences: int

    def to_json(self) -> str:
        return json.dumps({
            "bleu": list(self.bleu),
            "rouge1": {"recall": self.rouge_recall, "precision": self.rouge_precision,
                       "f1": self.rouge_f1},
            "token_accuracy": self.token_accuracy,
            "sentences": self.sentences,
        }, sort_keys=True)

    def to_table(self) -> str:
        rows = [f"sentences          {self.sentences}"]
        for n, v in enumerate(self.bleu, start=1):
            rows.append(f"BLEU-{n}             {v:.4f}")
        rows.append(f"ROUGE-1 recall     {self.rouge_recall:.4f}")
        rows.append(f"ROUGE-1 precision  {self.rouge_precision:.4f}")
        rows.append(f"ROUGE-1 f1         {self.rouge_f1:.4f}")
        if self.token_accuracy is not None:
            rows.append(f"token accuracy     {self.token_accuracy:.4f}")
        return "\n".join(rows)


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: list[list[str]], refs: list[list[str]], max_n: int) -> float:
    """Cumulative corpus BLEU over orders 1..max_n."""
    if max_n not in (1, 2, 3, 4):
        raise DataError(f"BLEU order must be in 1..4, got {max_n}")
    if not hyps or len(hyps) != len(refs):
        raise DataError(
            f"need equally many non-empty hypothesis/reference lists, got "
            f"{len(hyps)} vs {len(refs)}"
        )
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        clipped = 0
        total = 0
        for hyp, ref in zip(hyps, refs):
            hyp_counts = _ngram_counts(hyp, n)
            ref_counts = _ngram_counts(ref, n)
            clipped += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total += max(len(hyp) - n + 1, 0)
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_sum / max_n)


def rouge1(hyps: list[list[str]], refs: list[list[str]]) -> tuple[float, float, float]:
    """Mean per-sentence (recall, precision, f1) from clipped unigram overlap."""
    if not hyps or len(hyps) != len(refs):
        raise DataError(
            f"need equally many non-empty hypothesis/reference lists, got "
            f"{len(hyps)} vs {len(refs)}"
        )
    rs, ps, fs = [], [], []
    for hyp, ref in zip(hyps, refs):
        if not ref:
            raise DataError("empty reference sentence")
        if not hyp:
            rs.append(0.0), ps.append(0.0), fs.append(0.0)
            continue
        overlap = sum((Counter(hyp) & Counter(ref)).values())
        r = overlap / len(ref)
        p = overlap / len(hyp)
        f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        rs.append(r), ps.append(p), fs.append(f)
    n = len(hyps)
    return sum(rs) / n, sum(ps) / n, sum(fs) / n


# ---------------------------------------------------------------------------
# model predictions and checkpoint evaluation
# ---------------------------------------------------------------------------


def _strip_ids(ids) -> list[int]:
    return [int(i) for i in ids if int(i) not in _STRIP_IDS]


def _memory(model: DewaveModel, prep: PreparedSample):
    seq = vectorize(model, prep)
    z_c = model.encode(seq)
    _, z_q = quantize(z_c, model.codebook)
    return straight_through(z_c, z_q)


def predict_words(model: DewaveModel, prep: PreparedSample, vocab: Vocabulary,
                  teacher_forced: bool) -> tuple[list[str], float | None]:
    """(predicted words, per-sample token accuracy or None)."""
    memory = _memory(model, prep)
    if teacher_forced:
        _, _, preds = model.decode_teacher_forced(memory, prep.token_ids)
        targets = prep.token_ids[1:]
        keep = targets != PAD_ID
        acc = float((preds[keep] == targets[keep]).mean())
        words = [vocab.word_of(i) for i in _strip_ids(preds)]
        return words, acc
    ids = model.generate(memory, max_len=model.cfg.max_words + 1)
    words = [vocab.word_of(i) for i in _strip_ids(ids)]
    return words, None


def evaluate_model(model: DewaveModel, samples: list[Sample], vocab: Vocabulary,
                   teacher_forced: bool) -> EvalResult:
    if not samples:
        raise DataError("no samples to evaluate")
    prepared = prepare_samples(samples, model.cfg)
    hyps, refs, accs = [], [], []
    for s, prep in zip(samples, prepared):
        words, acc = predict_words(model, prep, vocab, teacher_forced)
        hyps.append(words)
        refs.append(list(s.text.words))
        if acc is not None:
            accs.append(acc)
    scores = tuple(bleu(hyps, refs, n) for n in (1, 2, 3, 4))
    r, p, f = rouge1(hyps, refs)
    return EvalResult(
        bleu=scores, rouge_recall=r, rouge_precision=p, rouge_f1=f,
        token_accuracy=(sum(accs) / len(accs)) if accs else None,
        sentences=len(samples),
    )


def select_split(samples: list[Sample], split: str,
                 subjects: list[str] | None = None) -> list[Sample]:
    chosen = [s for s in samples if s.split == split]
    if subjects is not None:
        wanted = set(subjects)
        chosen = [s for s in chosen if s.recording.subject in wanted]
    if not chosen:
        raise DataError(f"no samples in split {split!r}"
                        + (f" for subjects {sorted(set(subjects))}" if subjects else ""))
    return chosen


def check_compatible(model: DewaveModel, samples: list[Sample],
                     vocab: Vocabulary) -> None:
    if len(vocab) != model.cfg.vocab_size:
        raise StateError(
            f"dataset vocabulary has {len(vocab)} entries but the checkpoint was "
            f"trained with {model.cfg.vocab_size}"
        )
    if model.cfg.mode == WORD_MODE and any(not s.fixations for s in samples):
        raise StateError("word-level checkpoint needs fixation spans on every sample")


def evaluate_checkpoint(ckpt_path, data_dir, split: str, teacher_forced: bool,
                        subjects: list[str] | None = None) -> EvalResult:
    model, _ = DewaveModel.load(ckpt_path)
    samples = load_dataset(data_dir)
    vocab = build_vocabulary(samples)
    chosen = select_split(samples, split, subjects)
    check_compatible(model, chosen, vocab)
    return evaluate_model(model, chosen, vocab, teacher_forced)
