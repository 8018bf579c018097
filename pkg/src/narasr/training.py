"""Training stages: masked-LM pretraining of the decoder, encoder
pretraining against an embedding-tied head, end-to-end fine-tuning with
the ablation modes, and the sequential baseline's teacher-forced training.

All stages share the same machinery: duration-budgeted batches reshuffled
per epoch, gradient accumulation over micro-batches (sum reduction, so k
accumulated micro-batches match one k-times-larger batch), the warmup
schedule, bias-corrected Adam, a tab-separated step log, and one
checkpoint per epoch. Training is bit-deterministic given (seed, config,
data order).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import tensor as T
from .ar import ar_forward
from .checkpoint import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from .corpus import UtteranceRecord, batch_by_duration, resolve_audio_path
from .errors import ConfigError
from .frontend import FeatureSequence, SpecAugmentPolicy, log_mel_features, read_wav, spec_augment
from .model import ArModel, NarModel
from .optim import AdamState, Schedule, adam_step, noam_lr
from .tensor import Tensor
from .tokenizer import TokenSequence, Vocabulary, encode

FINETUNE_MODES = ("full", "no-encoder-pretrain", "no-decoder-pretrain", "scratch")


@dataclass
class TrainHyper:
    epochs: int = 10
    batch_seconds: float = 20.0
    accumulation: int = 1
    label_smoothing: float = 0.1
    seed: int = 0
    warmup_steps: int = 400
    include_pad_loss: bool = True
    mlm_mask_rate: float = 0.15
    mlm_batch_size: int = 32
    augment: Optional[SpecAugmentPolicy] = None

    def __post_init__(self):
        for name in ("epochs", "accumulation", "mlm_batch_size", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batch_seconds <= 0:
            raise ConfigError("batch_seconds must be positive")

    @classmethod
    def paper(cls) -> "TrainHyper":
        return cls(epochs=130, batch_seconds=100.0, accumulation=12,
                   label_smoothing=0.1, warmup_steps=12000)


@dataclass
class TrainingExample:
    record: UtteranceRecord
    features: np.ndarray  # [T, F]
    tokens: TokenSequence


def prepare_training_set(
    records: list[UtteranceRecord],
    manifest_path,
    vocab: Vocabulary,
    target_len: int,
    feat_bins: int = 80,
    window_ms: float = 25.0,
    shift_ms: float = 10.0,
) -> list[TrainingExample]:
    """Extract features once up front and tokenize every transcript."""
    examples = []
    for record in records:
        wave = read_wav(resolve_audio_path(manifest_path, record))
        feats = log_mel_features(wave, bins=feat_bins, window_ms=window_ms,
                                 shift_ms=shift_ms, utterance_id=record.id)
        examples.append(
            TrainingExample(
                record=record,
                features=feats.frames.data,
                tokens=encode(record.text, vocab, target_len),
            )
        )
    return examples


def _pad_batch(batch: list[TrainingExample], dtype, augment: Optional[SpecAugmentPolicy], rng):
    feats = []
    for ex in batch:
        f = ex.features
        if augment is not None:
            wrapped = FeatureSequence(frames=Tensor(f), frame_shift_ms=10.0, utterance_id=ex.record.id)
            f = spec_augment(wrapped, augment, rng).frames.data
        feats.append(f)
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    t_max = int(lengths.max())
    padded = np.zeros((len(batch), t_max, feats[0].shape[1]), dtype=dtype)
    for i, f in enumerate(feats):
        padded[i, : f.shape[0]] = f
    targets = np.stack([ex.tokens.ids for ex in batch])
    return padded, lengths, targets


def _loss_weights(batch: list[TrainingExample], length: int, include_pad: bool) -> np.ndarray:
    if include_pad:
        return np.ones((len(batch), length))
    weights = np.zeros((len(batch), length))
    for i, ex in enumerate(batch):
        weights[i, : ex.tokens.true_length] = 1.0
    return weights


def _write_log(handle, step: int, lr: float, loss: float) -> None:
    handle.write(f"{step}\t{lr:.10e}\t{loss:.8f}\n")
    handle.flush()


def _chunk(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _run_updates(
    params: dict[str, Tensor],
    batches: list,
    compute_loss: Callable,
    state: AdamState,
    schedule: Schedule,
    hyper: TrainHyper,
    update_start: int,
    log_handle,
) -> int:
    """Run one epoch's batches as accumulation groups; returns the update count."""
    update = update_start
    for group in _chunk(batches, hyper.accumulation):
        for p in params.values():
            p.grad = None
        group_loss = 0.0
        group_count = 0
        for batch in group:
            loss, n = compute_loss(batch)
            loss.backward()
            group_loss += loss.item()
            group_count += n
        update += 1
        lr = noam_lr(update, schedule)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)
        _write_log(log_handle, update, lr, group_loss / max(group_count, 1))
    return update


def pretrain_encoder(
    examples: list[TrainingExample],
    encoder_params: enc.EncoderParams,
    decoder_token_embedding: Tensor,
    vocab_size: int,
    hyper: TrainHyper,
    out_dir,
    metadata: Optional[dict[str, str]] = None,
) -> enc.EncoderParams:
    """Train the encoder to classify tokens through a temporary head whose
    weights start as the transpose of the decoder's token embedding. The
    head trains jointly and is discarded afterwards."""
    if decoder_token_embedding.shape[0] != vocab_size:
        raise ConfigError(
            f"token embedding covers {decoder_token_embedding.shape[0]} ids "
            f"but the target vocabulary has {vocab_size}"
        )
    if decoder_token_embedding.shape[1] != encoder_params.config.d_n:
        raise ConfigError(
            f"token embedding width {decoder_token_embedding.shape[1]} does not "
            f"match encoder output width {encoder_params.config.d_n}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = encoder_params.out_proj_W.data.dtype
    head = Tensor(decoder_token_embedding.data.T.astype(dtype).copy(), requires_grad=True)
    params = dict(encoder_params.trainable_tensors())
    params["pretrain_head.W"] = head
    state = AdamState(params)
    schedule = Schedule(d_model=encoder_params.config.d_m, warmup_steps=hyper.warmup_steps)
    rng = np.random.default_rng(hyper.seed)
    length = examples[0].tokens.ids.shape[0]

    def compute_loss(batch):
        feats, lengths, targets = _pad_batch(batch, dtype, hyper.augment, rng)
        h_f = enc.encoder_forward(Tensor(feats), encoder_params, training=True, rng=rng, lengths=lengths)
        logits = T.matmul(h_f, head)
        weights = _loss_weights(batch, length, hyper.include_pad_loss)
        return T.label_smoothed_nll(logits, targets, hyper.label_smoothing, weights=weights), len(batch)

    records = [ex.record for ex in examples]
    by_id = {ex.record.id: ex for ex in examples}
    update = 0
    with open(out / "encoder-pretrain.log", "a", encoding="utf-8") as log_handle:
        for epoch in range(1, hyper.epochs + 1):
            record_batches = batch_by_duration(records, hyper.batch_seconds, hyper.seed + epoch)
            batches = [[by_id[r.id] for r in b] for b in record_batches]
            update = _run_updates(params, batches, compute_loss, state, schedule, hyper, update, log_handle)
            save_checkpoint(
                out / f"encoder-pretrain-epoch-{epoch:04d}.ckpt",
                encoder_params.named_tensors(),
                {**(metadata or {}), "stage": "encoder-pretrain", "epoch": str(epoch), "step": str(update)},
            )
    return encoder_params


def finetune(
    examples: list[TrainingExample],
    encoder_params: Optional[enc.EncoderParams],
    decoder_params: Optional[dec.DecoderParams],
    encoder_cfg: enc.EncoderConfig,
    decoder_cfg: dec.DecoderConfig,
    hyper: TrainHyper,
    mode: str,
    out_dir,
    dtype=np.float32,
    metadata: Optional[dict[str, str]] = None,
) -> Checkpoint:
    """Joint training; `mode` selects which parameter sets are replaced by
    fresh random initializations before the run."""
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"unknown finetune mode {mode!r}; expected one of {FINETUNE_MODES}")
    init_rng = np.random.default_rng(hyper.seed + 1)
    if mode in ("no-encoder-pretrain", "scratch"):
        encoder_params = enc.init_encoder(encoder_cfg, init_rng, dtype)
    elif encoder_params is None:
        raise ConfigError(f"mode {mode} requires a pretrained encoder checkpoint")
    if mode in ("no-decoder-pretrain", "scratch"):
        decoder_params = dec.init_decoder(decoder_cfg, init_rng, dtype)
    elif decoder_params is None:
        raise ConfigError(f"mode {mode} requires a pretrained decoder checkpoint")

    model = NarModel(encoder=encoder_params, decoder=decoder_params)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = model.trainable_tensors()
    state = AdamState(params)
    schedule = Schedule(d_model=encoder_cfg.d_m, warmup_steps=hyper.warmup_steps)
    rng = np.random.default_rng(hyper.seed)
    length = examples[0].tokens.ids.shape[0]

    def compute_loss(batch):
        feats, lengths, targets = _pad_batch(batch, dtype, hyper.augment, rng)
        h_f = enc.encoder_forward(Tensor(feats), encoder_params, training=True, rng=rng, lengths=lengths)
        logits = dec.decoder_forward(h_f, decoder_params, training=True, rng=rng)
        weights = _loss_weights(batch, length, hyper.include_pad_loss)
        return T.label_smoothed_nll(logits, targets, hyper.label_smoothing, weights=weights), len(batch)

    records = [ex.record for ex in examples]
    by_id = {ex.record.id: ex for ex in examples}
    update = 0
    last_path = None
    with open(out / f"finetune-{mode}.log", "a", encoding="utf-8") as log_handle:
        for epoch in range(1, hyper.epochs + 1):
            record_batches = batch_by_duration(records, hyper.batch_seconds, hyper.seed + epoch)
            batches = [[by_id[r.id] for r in b] for b in record_batches]
            update = _run_updates(params, batches, compute_loss, state, schedule, hyper, update, log_handle)
            last_path = out / f"finetune-{mode}-epoch-{epoch:04d}.ckpt"
            model.save(last_path, {**(metadata or {}), "stage": "finetune", "mode": mode,
                                   "epoch": str(epoch), "step": str(update)})
    return load_checkpoint(last_path)


def train_mlm(
    sequences: list[TokenSequence],
    decoder_params: dec.DecoderParams,
    hyper: TrainHyper,
    out_dir,
    metadata: Optional[dict[str, str]] = None,
) -> dec.DecoderParams:
    """Text-only masked-LM pretraining over the transcript corpus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = decoder_params.trainable_tensors()
    state = AdamState(params)
    schedule = Schedule(d_model=decoder_params.config.d_n, warmup_steps=hyper.warmup_steps)
    rng = np.random.default_rng(hyper.seed)
    update = 0
    skipped = 0
    from .model import config_to_metadata

    with open(out / "mlm.log", "a", encoding="utf-8") as log_handle:
        for epoch in range(1, hyper.epochs + 1):
            order = np.random.default_rng(hyper.seed + epoch).permutation(len(sequences))
            shuffled = [sequences[i] for i in order]
            for batch in _chunk(shuffled, hyper.mlm_batch_size):
                lr = noam_lr(update + 1, schedule)
                loss = dec.mlm_pretrain_step(batch, decoder_params, state, hyper.mlm_mask_rate, lr, rng)
                if loss is None:
                    skipped += 1
                    continue
                update += 1
                _write_log(log_handle, update, lr, loss)
            save_checkpoint(
                out / f"mlm-epoch-{epoch:04d}.ckpt",
                decoder_params.named_tensors(),
                {**(metadata or {}), **config_to_metadata("config.decoder", decoder_params.config),
                 "stage": "mlm", "epoch": str(epoch), "step": str(update),
                 "skipped_steps": str(skipped)},
            )
    return decoder_params


def train_ar(
    examples: list[TrainingExample],
    model: ArModel,
    hyper: TrainHyper,
    out_dir,
    metadata: Optional[dict[str, str]] = None,
) -> ArModel:
    """Teacher-forced training of the sequential baseline (its own frame
    encoder plus the causal decoder), minimizing the same smoothed loss."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = model.ar.head_W.data.dtype
    params = model.trainable_tensors()
    state = AdamState(params)
    schedule = Schedule(d_model=model.ar.config.d_m, warmup_steps=hyper.warmup_steps)
    rng = np.random.default_rng(hyper.seed)
    length = examples[0].tokens.ids.shape[0]

    def compute_loss(batch):
        feats, lengths, targets = _pad_batch(batch, dtype, hyper.augment, rng)
        t4 = np.array([enc.output_frame_count(int(t)) for t in lengths])
        h_a = enc.encode_acoustic(Tensor(feats), model.encoder, training=True, rng=rng, lengths=lengths)
        logits = ar_forward(targets[:, :-1], h_a, model.ar, training=True, rng=rng, h_a_lengths=t4)
        weights = _loss_weights(batch, length, hyper.include_pad_loss)[:, 1:]
        return T.label_smoothed_nll(logits, targets[:, 1:], hyper.label_smoothing, weights=weights), len(batch)

    records = [ex.record for ex in examples]
    by_id = {ex.record.id: ex for ex in examples}
    update = 0
    with open(out / "ar.log", "a", encoding="utf-8") as log_handle:
        for epoch in range(1, hyper.epochs + 1):
            record_batches = batch_by_duration(records, hyper.batch_seconds, hyper.seed + epoch)
            batches = [[by_id[r.id] for r in b] for b in record_batches]
            update = _run_updates(params, batches, compute_loss, state, schedule, hyper, update, log_handle)
            model.save(out / f"ar-epoch-{epoch:04d}.ckpt",
                       {**(metadata or {}), "stage": "ar", "epoch": str(epoch), "step": str(update)})
    return model


def params_digest(named: dict[str, Tensor]) -> str:
    """Stable fingerprint of a parameter set (for initialization checks)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(named[name].data, dtype="<f4").tobytes())
    return h.hexdigest()
