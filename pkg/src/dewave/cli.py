"""Command-line interface.

Subcommands: synth, featurize, pretrain, train, finetune, translate,
evaluate, dump-codebook. Exit codes: 0 success, 2 config error, 3 data or
format error, 4 state error. Run configs are strict JSON documents:
unknown keys are rejected by name. DEWAVE_THREADS caps the worker pool
used for per-sample featurization.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codex import dump_codebook
from .corpus import Sample, SynthConfig, build_vocabulary, load_dataset, save_dataset, synth_corpus
from .errors import ConfigError, DataError, DewaveError, StateError
from .featurizer import feature_dim, featurize_sample, write_feature_matrix
from .metrics import evaluate_model, check_compatible, predict_words, select_split
from .seq2text import RAW_MODE, WORD_MODE, DewaveModel, ModelConfig
from .trainer import TrainConfig, TrainReport, pretrain_stage0, train_stage1, train_stage2

_TOP_KEYS = {"mode", "seed", "data_dir", "checkpoint", "report",
             "train_subjects", "test_subjects", "synth", "model", "train"}
_MODEL_KEYS = {"dim", "heads", "encoder_layers", "decoder_layers", "recon_layers",
               "codebook_size", "max_words", "pad_samples", "kernels", "strides",
               "recon_kernels", "recon_strides", "recon_final_kernel",
               "recon_final_stride"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"mode", "seed"}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)}


@dataclass
class RunConfig:
    mode: str | None
    seed: int
    data_dir: str | None
    checkpoint: str | None
    report: str | None
    train_subjects: list[str] | None
    test_subjects: list[str] | None
    synth: SynthConfig | None
    model_overrides: dict
    train_overrides: dict

    def train_config(self) -> TrainConfig:
        if self.mode is None:
            raise ConfigError("config is missing the 'mode' key")
        return TrainConfig(mode=self.mode, seed=self.seed, **self.train_overrides)


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where}")


def _opt_str_list(value, where: str) -> list[str] | None:
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{where} must be a list of strings or null")
    return value


def load_run_config(path) -> RunConfig:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise ConfigError(f"config file not found: {cfg_path}")
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{cfg_path}: config root must be an object")
    _check_keys(doc, _TOP_KEYS, "config root")

    mode = doc.get("mode")
    if mode is not None and mode not in (WORD_MODE, RAW_MODE):
        raise ConfigError(f"mode must be {WORD_MODE!r} or {RAW_MODE!r}, got {mode!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    synth_cfg = None
    if "synth" in doc:
        section = doc["synth"]
        if not isinstance(section, dict):
            raise ConfigError("'synth' must be an object")
        _check_keys(section, _SYNTH_KEYS, "'synth'")
        synth_cfg = SynthConfig(**section)
        synth_cfg.validate()

    model_overrides = doc.get("model", {})
    if not isinstance(model_overrides, dict):
        raise ConfigError("'model' must be an object")
    _check_keys(model_overrides, _MODEL_KEYS, "'model'")
    for key in ("kernels", "strides", "recon_kernels", "recon_strides"):
        if key in model_overrides:
            model_overrides[key] = tuple(model_overrides[key])

    train_overrides = doc.get("train", {})
    if not isinstance(train_overrides, dict):
        raise ConfigError("'train' must be an object")
    _check_keys(train_overrides, _TRAIN_KEYS, "'train'")

    return RunConfig(
        mode=mode,
        seed=seed,
        data_dir=doc.get("data_dir"),
        checkpoint=doc.get("checkpoint"),
        report=doc.get("report"),
        train_subjects=_opt_str_list(doc.get("train_subjects"), "'train_subjects'"),
        test_subjects=_opt_str_list(doc.get("test_subjects"), "'test_subjects'"),
        synth=synth_cfg,
        model_overrides=model_overrides,
        train_overrides=train_overrides,
    )


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) is None:
            raise ConfigError(f"config is missing the {key!r} key")


def _check_parent(path, what: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise ConfigError(f"{what} directory does not exist: {p.parent}")
    return p


def _load_data(cfg: RunConfig) -> list[Sample]:
    _require(cfg, "data_dir")
    if not Path(cfg.data_dir).is_dir():
        raise DataError(f"dataset directory not found: {cfg.data_dir}")
    return load_dataset(cfg.data_dir)


def _train_samples(cfg: RunConfig, samples: list[Sample]) -> list[Sample]:
    return select_split(samples, "train", cfg.train_subjects)


def _build_model(cfg: RunConfig, samples: list[Sample], tcfg: TrainConfig) -> DewaveModel:
    vocab = build_vocabulary(samples)
    channels = samples[0].recording.channels
    if any(s.recording.channels != channels for s in samples):
        raise DataError("samples disagree on channel count")
    mcfg = ModelConfig(
        mode=cfg.mode,
        vocab_size=len(vocab),
        channels=channels,
        word_pretrain=(tcfg.word_pretrain and cfg.mode == WORD_MODE),
        **cfg.model_overrides,
    )
    return DewaveModel(mcfg, seed=cfg.seed)


def _load_model_for(cfg: RunConfig, from_path, samples: list[Sample]) -> tuple[DewaveModel, int]:
    if not Path(from_path).is_file():
        raise StateError(f"checkpoint not found: {from_path}")
    model, stage = DewaveModel.load(from_path)
    if cfg.mode is not None and model.cfg.mode != cfg.mode:
        raise StateError(
            f"checkpoint mode {model.cfg.mode!r} does not match config mode {cfg.mode!r}"
        )
    vocab = build_vocabulary(samples)
    if len(vocab) != model.cfg.vocab_size:
        raise StateError(
            f"dataset vocabulary has {len(vocab)} entries but the checkpoint was "
            f"trained with {model.cfg.vocab_size}"
        )
    return model, stage


def _finish_training(cfg: RunConfig, model: DewaveModel, report: TrainReport,
                     stage: int) -> None:
    ckpt = _check_parent(cfg.checkpoint, "checkpoint")
    model.save(ckpt, stage=stage)
    if cfg.report is not None:
        report_path = _check_parent(cfg.report, "report")
        report_path.write_text(report.to_jsonl(), encoding="utf-8")


def _worker_count() -> int:
    env = os.environ.get("DEWAVE_THREADS")
    if env is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"DEWAVE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"DEWAVE_THREADS must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.synth is None:
        raise ConfigError("config is missing the 'synth' section")
    out = Path(args.out)
    samples = synth_corpus(cfg.synth, cfg.seed)
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_featurize(args) -> int:
    if not Path(args.data).is_dir():
        raise DataError(f"dataset directory not found: {args.data}")
    samples = load_dataset(args.data)
    out = _check_parent(args.out, "output")
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        sequences = list(pool.map(featurize_sample, samples))
    rows = [fs.values[fs.mask] for fs in sequences]
    matrix = np.concatenate(rows, axis=0)
    write_feature_matrix(out, matrix)
    dim = feature_dim(samples[0].recording.channels)
    print(f"wrote {matrix.shape[0]} word features of dim {dim} to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    _require(cfg, "mode", "checkpoint")
    tcfg = cfg.train_config()
    samples = _load_data(cfg)
    model = _build_model(cfg, samples, tcfg)
    report = pretrain_stage0(_train_samples(cfg, samples), tcfg, model)
    _finish_training(cfg, model, report, stage=0)
    print(f"stage-0 checkpoint written to {cfg.checkpoint}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _require(cfg, "mode", "checkpoint")
    tcfg = cfg.train_config()
    samples = _load_data(cfg)
    if args.from_ckpt is not None:
        model, _ = _load_model_for(cfg, args.from_ckpt, samples)
    else:
        model = _build_model(cfg, samples, tcfg)
    report = train_stage1(_train_samples(cfg, samples), tcfg, model)
    _finish_training(cfg, model, report, stage=1)
    print(f"stage-1 checkpoint written to {cfg.checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    if args.from_ckpt is None:
        raise StateError("finetune requires --from with a stage-1 checkpoint")
    cfg = load_run_config(args.config)
    _require(cfg, "mode", "checkpoint")
    tcfg = cfg.train_config()
    samples = _load_data(cfg)
    model, stage = _load_model_for(cfg, args.from_ckpt, samples)
    if stage != 1:
        raise StateError(f"finetune needs a stage-1 checkpoint, got stage {stage}")
    report = train_stage2(_train_samples(cfg, samples), tcfg, model)
    _finish_training(cfg, model, report, stage=2)
    print(f"stage-2 checkpoint written to {cfg.checkpoint}")
    return 0


def _load_for_inference(args) -> tuple[DewaveModel, list[Sample]]:
    if not Path(args.from_ckpt).is_file():
        raise StateError(f"checkpoint not found: {args.from_ckpt}")
    if not Path(args.data).is_dir():
        raise DataError(f"dataset directory not found: {args.data}")
    model, _ = DewaveModel.load(args.from_ckpt)
    samples = load_dataset(args.data)
    return model, samples


def cmd_translate(args) -> int:
    model, samples = _load_for_inference(args)
    vocab = build_vocabulary(samples)
    subjects = args.subjects.split(",") if args.subjects else None
    chosen = select_split(samples, args.split, subjects)
    check_compatible(model, chosen, vocab)
    from .trainer import prepare_samples
    prepared = prepare_samples(chosen, model.cfg)
    lines = []
    for prep in prepared:
        words, _ = predict_words(model, prep, vocab, teacher_forced=args.teacher_forced)
        lines.append(" ".join(words))
    out = _check_parent(args.out, "output")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} predictions to {out}")
    return 0


def cmd_evaluate(args) -> int:
    model, samples = _load_for_inference(args)
    vocab = build_vocabulary(samples)
    subjects = args.subjects.split(",") if args.subjects else None
    chosen = select_split(samples, args.split, subjects)
    check_compatible(model, chosen, vocab)
    result = evaluate_model(model, chosen, vocab, teacher_forced=args.teacher_forced)
    print(result.to_table())
    if args.out is not None:
        out = _check_parent(args.out, "output")
        out.write_text(result.to_json() + "\n", encoding="utf-8")
    else:
        print(result.to_json())
    return 0


def cmd_dump_codebook(args) -> int:
    if not Path(args.from_ckpt).is_file():
        raise StateError(f"checkpoint not found: {args.from_ckpt}")
    model, _ = DewaveModel.load(args.from_ckpt)
    out = _check_parent(args.out, "output")
    dump_codebook(out, model.codebook.entries.data)
    print(f"wrote {model.codebook.k}x{model.codebook.m} codebook to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dewave",
        description="EEG-to-text translation through a discrete wave codex.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="export word-level band-power features")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="stage-0 self-supervised pretraining")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage-1 codex training (decoder frozen)")
    p.add_argument("--config", required=True)
    p.add_argument("--from", dest="from_ckpt", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="stage-2 fine-tuning of the whole decoder path")
    p.add_argument("--config", required=True)
    p.add_argument("--from", dest="from_ckpt", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("translate", help="write one predicted sentence per line")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--out", default="predictions.txt")
    p.add_argument("--subjects", default=None, help="comma-separated subject filter")
    p.add_argument("--teacher-forced", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU/ROUGE evaluation of a checkpoint")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--teacher-forced", action="store_true")
    p.add_argument("--subjects", default=None, help="comma-separated subject filter")
    p.add_argument("--out", default=None, help="write the JSON result here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-codebook", help="dump the codebook table as binary")
    p.add_argument("--from", dest="from_ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_codebook)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return 4
    except DewaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
