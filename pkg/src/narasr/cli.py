"""Command-line entry point: corpus generation, the two-stage training
recipe with its ablation modes, decoding, scoring, and the latency bench.

Exit codes: 0 success, 2 usage/configuration errors, 3 numeric faults.
Heavy imports happen inside handlers so --threads can pin the BLAS thread
pools through environment variables before NumPy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import RunConfig, parse_config_file
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    LengthError,
    NumericFault,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narasr", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap; defaults to $NAR_ASR_THREADS or 1. "
                             "1 selects the deterministic/bench path")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the tone-language corpus")
    p.add_argument("--spec", type=Path, default=None, help="key=value task spec file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("stats", help="print corpus statistics for a manifest")
    p.add_argument("--manifest", type=Path, required=True)

    for name, help_text in (
        ("train-lm", "masked-LM pretraining of the decoder on transcripts"),
        ("pretrain-encoder", "train the encoder against the embedding-tied head"),
        ("train-ar", "teacher-forced training of the sequential baseline"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a configuration key")

    p = sub.add_parser("finetune", help="end-to-end training with ablation modes")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--mode", choices=["full", "no-encoder-pretrain", "no-decoder-pretrain", "scratch"],
                   default="full")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("decode", help="write hypotheses for a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--average-last", type=int, default=None, metavar="K")

    p = sub.add_parser("eval", help="score a manifest: error rate and timing")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="directory for report.tsv / details.jsonl")
    p.add_argument("--average-last", type=int, default=None, metavar="K")

    p = sub.add_parser("bench", help="compare parallel and sequential decoding latency")
    p.add_argument("--checkpoint", type=Path, required=True, help="parallel-model checkpoint")
    p.add_argument("--ar-checkpoint", type=Path, required=True, help="sequential-baseline checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="file for the tab-separated bench report")
    p.add_argument("--average-last", type=int, default=None, metavar="K")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("NAR_ASR_THREADS", "1"))
    if threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    args.threads = threads

    handlers = {
        "gen-data": cmd_gen_data,
        "stats": cmd_stats,
        "train-lm": cmd_train_lm,
        "pretrain-encoder": cmd_pretrain_encoder,
        "train-ar": cmd_train_ar,
        "finetune": cmd_finetune,
        "decode": cmd_decode,
        "eval": cmd_eval,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, DimensionError, LengthError, CheckpointError,
            FileNotFoundError, IsADirectoryError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_run_config(args) -> RunConfig:
    return RunConfig(file_path=args.config, overrides=_parse_overrides(args.overrides))


# ---------------------------------------------------------------------------
# data commands
# ---------------------------------------------------------------------------

SPEC_KEYS = {
    "vocab_size": int, "tokens_min": int, "tokens_max": int,
    "tone_base_hz": float, "tone_step_ratio": float, "token_duration_ms": float,
    "noise_amplitude": float, "sample_rate": int,
    "train_count": int, "dev_count": int, "test_count": int,
}


def cmd_gen_data(args) -> int:
    from .corpus import SyntheticTaskSpec, generate_synthetic_corpus

    kwargs = {}
    if args.spec is not None:
        raw = parse_config_file(args.spec)
        unknown = sorted(set(raw) - set(SPEC_KEYS))
        if unknown:
            raise ConfigError(f"{args.spec}: unknown task-spec key {unknown[0]!r}")
        kwargs = {k: SPEC_KEYS[k](v) for k, v in raw.items()}
    spec = SyntheticTaskSpec(**kwargs)
    manifests = generate_synthetic_corpus(spec, args.seed, args.out)
    resolved = "\n".join(f"{k}={getattr(spec, k)}" for k in sorted(SPEC_KEYS)) + f"\nseed={args.seed}\n"
    (Path(args.out) / "spec.resolved.cfg").write_text(resolved, encoding="utf-8")
    for split, path in manifests.items():
        print(f"{split}\t{path}")
    return 0


def cmd_stats(args) -> int:
    from .corpus import corpus_stats, format_stats, read_manifest

    records = read_manifest(args.manifest)
    print(format_stats(corpus_stats(records)))
    return 0


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------


def _feature_args(cfg: RunConfig) -> dict:
    return {
        "feat_bins": cfg.get_int("feat.bins"),
        "window_ms": cfg.get_float("feat.window_ms"),
        "shift_ms": cfg.get_float("feat.shift_ms"),
    }


def _augment_policy(cfg: RunConfig):
    from .frontend import SpecAugmentPolicy

    policy = SpecAugmentPolicy(
        freq_mask_width_max=cfg.get_int("augment.freq_mask_width"),
        freq_masks=cfg.get_int("augment.freq_masks"),
        time_mask_width_max=cfg.get_int("augment.time_mask_width"),
        time_masks=cfg.get_int("augment.time_masks"),
    )
    if policy.freq_masks == 0 and policy.time_masks == 0:
        return None
    return policy


def _hyper(cfg: RunConfig):
    from .training import TrainHyper

    return TrainHyper(
        epochs=cfg.get_int("train.epochs"),
        batch_seconds=cfg.get_float("train.batch_seconds"),
        accumulation=cfg.get_int("train.accumulation"),
        label_smoothing=cfg.get_float("train.label_smoothing"),
        seed=cfg.get_int("train.seed"),
        warmup_steps=cfg.get_int("train.warmup_steps"),
        include_pad_loss=cfg.get_bool("train.include_pad_loss"),
        mlm_mask_rate=cfg.get_float("train.mlm_mask_rate"),
        mlm_batch_size=cfg.get_int("train.mlm_batch_size"),
        augment=_augment_policy(cfg),
    )


def _dtype(cfg: RunConfig):
    import numpy as np

    name = cfg.get("train.dtype")
    if name == "float32":
        return np.float32
    if name == "float64":
        return np.float64
    raise ConfigError(f"train.dtype must be float32 or float64, got {name!r}")


def _encoder_config(cfg: RunConfig):
    from .encoder import EncoderConfig

    return EncoderConfig(
        d_m=cfg.get_int("encoder.d_m"),
        d_n=cfg.get_int("encoder.d_n"),
        feat_dim=cfg.get_int("feat.bins"),
        cnn_filters=cfg.get_int("encoder.cnn_filters"),
        kernel=cfg.get_int("encoder.kernel"),
        self_attn_layers_pre=cfg.get_int("encoder.pre_layers"),
        refine_layers=cfg.get_int("encoder.refine_layers"),
        self_attn_layers_post=cfg.get_int("encoder.post_layers"),
        heads=cfg.get_int("encoder.heads"),
        d_ff=cfg.get_int("encoder.d_ff"),
        query_count=cfg.get_int("encoder.query_count"),
        dropout=cfg.get_float("encoder.dropout"),
    )


def _decoder_config(cfg: RunConfig, vocab_size: int):
    from .decoder import DecoderConfig

    return DecoderConfig(
        vocab_size=vocab_size,
        d_n=cfg.get_int("encoder.d_n"),
        layers=cfg.get_int("decoder.layers"),
        heads=cfg.get_int("decoder.heads"),
        d_ff=cfg.get_int("decoder.d_ff"),
        max_positions=cfg.get_int("decoder.max_positions"),
        dropout=cfg.get_float("decoder.dropout"),
    )


def _ar_config(cfg: RunConfig, vocab_size: int):
    from .ar import ArConfig

    return ArConfig(
        vocab_size=vocab_size,
        d_m=cfg.get_int("encoder.d_m"),
        layers=cfg.get_int("ar.layers"),
        heads=cfg.get_int("ar.heads"),
        d_ff=cfg.get_int("ar.d_ff"),
        max_len=cfg.get_int("encoder.query_count"),
        dropout=cfg.get_float("ar.dropout"),
    )


def _load_vocab(cfg: RunConfig, out_dir: Path):
    """Load the configured vocabulary, or build it from the train manifest
    and save it under the output directory."""
    from .corpus import read_manifest
    from .tokenizer import Vocabulary, build_vocab

    vocab_path = cfg.get("data.vocab")
    if vocab_path:
        return Vocabulary.load(vocab_path), Path(vocab_path)
    records = read_manifest(cfg.require("data.train_manifest"))
    vocab = build_vocab(r.text for r in records)
    out_dir.mkdir(parents=True, exist_ok=True)
    saved = out_dir / "vocab.txt"
    vocab.save(saved)
    return vocab, saved


def _training_examples(cfg: RunConfig, vocab, manifest_key="data.train_manifest"):
    from .corpus import read_manifest
    from .training import prepare_training_set

    manifest = cfg.require(manifest_key)
    records = read_manifest(manifest)
    return prepare_training_set(
        records, manifest, vocab, cfg.get_int("encoder.query_count"), **_feature_args(cfg)
    )


def _resolve_checkpoint(path_text: str, key: str) -> Path:
    """Accept a checkpoint file or a directory holding epoch checkpoints
    (the newest by name wins)."""
    if not path_text:
        raise ConfigError(f"missing prerequisite checkpoint: set {key}")
    path = Path(path_text)
    if path.is_dir():
        candidates = sorted(path.glob("*.ckpt"))
        if not candidates:
            raise ConfigError(f"{key}: no checkpoints found under {path}")
        return candidates[-1]
    if not path.exists():
        raise ConfigError(f"{key}: checkpoint {path} does not exist")
    return path


def cmd_train_lm(args) -> int:
    from .decoder import init_decoder
    from .tokenizer import encode
    from .training import train_mlm
    import numpy as np

    cfg = _load_run_config(args)
    out_dir = Path(cfg.get("train.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.persist(out_dir / "train-lm.config")
    vocab, vocab_path = _load_vocab(cfg, out_dir)
    from .corpus import read_manifest

    records = read_manifest(cfg.require("data.train_manifest"))
    target_len = cfg.get_int("encoder.query_count")
    sequences = [encode(r.text, vocab, target_len) for r in records]
    decoder_cfg = _decoder_config(cfg, len(vocab))
    hyper = _hyper(cfg)
    hyper.epochs = cfg.get_int("train.mlm_epochs")
    params = init_decoder(decoder_cfg, np.random.default_rng(hyper.seed), _dtype(cfg))
    train_mlm(sequences, params, hyper, out_dir,
              metadata={"config_digest": cfg.digest(), "vocab": str(vocab_path)})
    print(f"vocab\t{vocab_path}")
    print(f"checkpoints\t{out_dir}")
    return 0


def cmd_pretrain_encoder(args) -> int:
    from .checkpoint import load_checkpoint
    from .encoder import init_encoder
    from .model import config_to_metadata, decoder_params_from_tensors, config_from_metadata
    from .decoder import DecoderConfig
    from .training import pretrain_encoder
    import numpy as np

    cfg = _load_run_config(args)
    out_dir = Path(cfg.get("train.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.persist(out_dir / "pretrain-encoder.config")
    vocab, _ = _load_vocab(cfg, out_dir)
    mlm_path = _resolve_checkpoint(cfg.get("train.mlm_checkpoint"), "train.mlm_checkpoint")
    mlm_ckpt = load_checkpoint(mlm_path)
    decoder_cfg = config_from_metadata("config.decoder", DecoderConfig, mlm_ckpt.metadata)
    dtype = _dtype(cfg)
    decoder_params = decoder_params_from_tensors(decoder_cfg, mlm_ckpt.tensors, dtype)
    encoder_cfg = _encoder_config(cfg)
    hyper = _hyper(cfg)
    encoder_params = init_encoder(encoder_cfg, np.random.default_rng(hyper.seed), dtype)
    examples = _training_examples(cfg, vocab)
    pretrain_encoder(
        examples, encoder_params, decoder_params.token_embedding, len(vocab), hyper, out_dir,
        metadata={**config_to_metadata("config.encoder", encoder_cfg),
                  "config_digest": cfg.digest(), "mlm_checkpoint": str(mlm_path)},
    )
    print(f"checkpoints\t{out_dir}")
    return 0


def cmd_finetune(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import config_from_metadata, decoder_params_from_tensors, encoder_params_from_tensors
    from .decoder import DecoderConfig
    from .training import finetune
    import numpy as np

    cfg = _load_run_config(args)
    out_dir = Path(cfg.get("train.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.persist(out_dir / f"finetune-{args.mode}.config")
    vocab, _ = _load_vocab(cfg, out_dir)
    dtype = _dtype(cfg)
    encoder_cfg = _encoder_config(cfg)
    decoder_cfg = _decoder_config(cfg, len(vocab))

    encoder_params = None
    decoder_params = None
    if args.mode in ("full", "no-decoder-pretrain"):
        path = _resolve_checkpoint(cfg.get("train.encoder_checkpoint"), "train.encoder_checkpoint")
        encoder_params = encoder_params_from_tensors(encoder_cfg, load_checkpoint(path).tensors, dtype)
    if args.mode in ("full", "no-encoder-pretrain"):
        path = _resolve_checkpoint(cfg.get("train.decoder_checkpoint"), "train.decoder_checkpoint")
        ckpt = load_checkpoint(path)
        loaded_cfg = config_from_metadata("config.decoder", DecoderConfig, ckpt.metadata)
        decoder_params = decoder_params_from_tensors(loaded_cfg, ckpt.tensors, dtype)
        decoder_cfg = loaded_cfg

    examples = _training_examples(cfg, vocab)
    hyper = _hyper(cfg)
    finetune(
        examples, encoder_params, decoder_params, encoder_cfg, decoder_cfg,
        hyper, args.mode, out_dir, dtype,
        metadata={"config_digest": cfg.digest()},
    )
    print(f"checkpoints\t{out_dir}")
    return 0


def cmd_train_ar(args) -> int:
    from .model import ArModel
    from .training import train_ar
    import numpy as np

    cfg = _load_run_config(args)
    out_dir = Path(cfg.get("train.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.persist(out_dir / "train-ar.config")
    vocab, _ = _load_vocab(cfg, out_dir)
    hyper = _hyper(cfg)
    model = ArModel.init(
        _encoder_config(cfg), _ar_config(cfg, len(vocab)),
        np.random.default_rng(hyper.seed), _dtype(cfg),
    )
    examples = _training_examples(cfg, vocab)
    train_ar(examples, model, hyper, out_dir, metadata={"config_digest": cfg.digest()})
    print(f"checkpoints\t{out_dir}")
    return 0


# ---------------------------------------------------------------------------
# inference commands
# ---------------------------------------------------------------------------


def _pick_checkpoint(path: Path, average_last) :
    """Return a Checkpoint or a path; applies trailing-K averaging when asked."""
    from .checkpoint import average_checkpoints, load_checkpoint

    if path.is_dir():
        candidates = sorted(path.glob("*.ckpt"))
        if not candidates:
            raise ConfigError(f"no checkpoints found under {path}")
        if average_last is None:
            return load_checkpoint(candidates[-1])
        if average_last < 1:
            raise ConfigError("--average-last must be >= 1")
        if average_last > len(candidates):
            raise ConfigError(
                f"--average-last {average_last} exceeds the {len(candidates)} checkpoints under {path}"
            )
        return average_checkpoints(candidates[-average_last:])
    if average_last is not None and average_last != 1:
        raise ConfigError("--average-last needs a checkpoint directory, not a single file")
    return load_checkpoint(path)


def _load_nar_model(args):
    from .model import NarModel

    ckpt = _pick_checkpoint(args.checkpoint, args.average_last)
    return NarModel.from_checkpoint(ckpt)


def cmd_decode(args) -> int:
    from .corpus import read_manifest, resolve_audio_path
    from .evaluate import nar_greedy_decode
    from .frontend import log_mel_features, read_wav
    from .tokenizer import Vocabulary

    model = _load_nar_model(args)
    vocab = Vocabulary.load(args.vocab)
    records = read_manifest(args.manifest)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    bins = model.encoder.config.feat_dim
    with open(args.out, "w", encoding="utf-8") as out:
        for record in records:
            wave = read_wav(resolve_audio_path(args.manifest, record))
            features = log_mel_features(wave, bins=bins, utterance_id=record.id)
            result = nar_greedy_decode(features, model, vocab)
            out.write(f"{record.id}\t{result.hypothesis}\n")
    print(f"hypotheses\t{args.out}")
    return 0


def cmd_eval(args) -> int:
    import json

    from .corpus import read_manifest
    from .evaluate import evaluate, format_report
    from .tokenizer import Vocabulary

    model = _load_nar_model(args)
    vocab = Vocabulary.load(args.vocab)
    records = read_manifest(args.manifest)
    report, details = evaluate(
        model, records, vocab, args.manifest,
        feat_bins=model.encoder.config.feat_dim, threads=args.threads,
    )
    summary = format_report(report)
    print(summary)
    for failure in report.failures:
        print(f"failed\t{failure}", file=sys.stderr)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.tsv").write_text(summary + "\n", encoding="utf-8")
        with open(args.out / "details.jsonl", "w", encoding="utf-8") as handle:
            for row in details:
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return 0


def cmd_bench(args) -> int:
    from .corpus import read_manifest, resolve_audio_path
    from .evaluate import ar_greedy_decode_result, measure_rtf, nar_greedy_decode
    from .frontend import log_mel_features, read_wav
    from .model import ArModel
    from .tokenizer import Vocabulary

    nar_model = _load_nar_model(args)
    ar_model = ArModel.from_checkpoint(_pick_checkpoint(args.ar_checkpoint, args.average_last))
    vocab = Vocabulary.load(args.vocab)
    records = read_manifest(args.manifest)
    if not records:
        raise ConfigError("empty manifest")
    bins = nar_model.encoder.config.feat_dim
    test_set = []
    for record in records:
        wave = read_wav(resolve_audio_path(args.manifest, record))
        test_set.append((log_mel_features(wave, bins=bins, utterance_id=record.id), record.duration_sec))

    max_len = nar_model.encoder.config.query_count
    decode_nar = lambda f: nar_greedy_decode(f, nar_model, vocab)  # noqa: E731
    decode_ar = lambda f: ar_greedy_decode_result(f, ar_model, vocab, max_len)  # noqa: E731
    decode_nar(test_set[0][0])  # warm both models outside the clock and counters
    decode_ar(test_set[0][0])
    nar_model.forward_count = 0
    ar_model.forward_count = 0
    rtf_nar = measure_rtf(decode_nar, test_set, warmup=False)
    rtf_ar = measure_rtf(decode_ar, test_set, warmup=False)
    ratio = rtf_ar / rtf_nar if rtf_nar > 0 else float("inf")

    lines = [
        f"utterances\t{len(records)}",
        f"rtf_nar\t{rtf_nar:.6f}",
        f"rtf_ar\t{rtf_ar:.6f}",
        f"ratio\t{ratio:.2f}",
        f"forwards_nar\t{nar_model.forward_count}",
        f"forwards_ar\t{ar_model.forward_count}",
    ]
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
