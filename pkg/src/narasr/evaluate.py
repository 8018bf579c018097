"""Parallel greedy decoding, corpus scoring, and real-time-factor timing.

Timing covers model inference only; feature extraction happens before the
clock starts and its cost is reported separately by the CLI.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .decoder import classify_positions
from .errors import ContractError
from .frontend import FeatureSequence, log_mel_features, read_wav
from .metrics import cer
from .model import ArModel, NarModel
from .tokenizer import Vocabulary, decode as detokenize


@dataclass
class DecodeResult:
    utterance_id: str
    hypothesis: str
    top1_probs: np.ndarray
    wall_time_sec: float

    def __post_init__(self):
        if self.wall_time_sec < 0:
            raise ContractError("wall time cannot be negative")


@dataclass
class ScoreReport:
    cer: float
    substitutions: int
    deletions: int
    insertions: int
    rtf: float
    utterance_count: int
    reference_chars: int
    failures: list[str] = field(default_factory=list)


def nar_greedy_decode(features: FeatureSequence, model: NarModel, vocab: Vocabulary) -> DecodeResult:
    """One model pass, per-position argmax, detokenize up to the first [SEP]."""
    start = time.perf_counter()
    logits = model.forward(features)
    ids = classify_positions(logits)
    probs = _softmax_rows(logits.data)
    top1 = probs[np.arange(len(ids)), ids]
    hypothesis = detokenize(ids, vocab)
    wall = time.perf_counter() - start
    return DecodeResult(
        utterance_id=features.utterance_id,
        hypothesis=hypothesis,
        top1_probs=top1,
        wall_time_sec=wall,
    )


def ar_greedy_decode_result(features: FeatureSequence, model: ArModel, vocab: Vocabulary, max_len: int) -> DecodeResult:
    start = time.perf_counter()
    ids = model.decode_ids(features, max_len)
    hypothesis = detokenize(ids, vocab)
    wall = time.perf_counter() - start
    return DecodeResult(
        utterance_id=features.utterance_id,
        hypothesis=hypothesis,
        top1_probs=np.zeros(0),
        wall_time_sec=wall,
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def measure_rtf(decode_fn: Callable[[FeatureSequence], DecodeResult],
                test_set: list[tuple[FeatureSequence, float]],
                warmup: bool = True) -> float:
    """Total decode wall time over total audio duration, single-threaded;
    a warm-up pass on the first utterance is excluded from the clock (pass
    warmup=False when the caller has already warmed the model)."""
    total_duration = sum(duration for _, duration in test_set)
    if total_duration <= 0:
        raise ContractError("cannot compute a real-time factor over zero audio")
    if warmup:
        decode_fn(test_set[0][0])
    total_wall = 0.0
    for features, _ in test_set:
        start = time.perf_counter()
        decode_fn(features)
        total_wall += time.perf_counter() - start
    return total_wall / total_duration


def evaluate(
    model: NarModel,
    records,
    vocab: Vocabulary,
    manifest_path,
    feat_bins: int = 80,
    window_ms: float = 25.0,
    shift_ms: float = 10.0,
    threads: int = 1,
) -> tuple[ScoreReport, list[dict]]:
    """Decode a manifest and micro-average the edit statistics.

    Unreadable utterances are recorded as failures and skipped; the run
    continues. Detail rows are JSON-ready dicts, one per utterance.
    """
    from .corpus import resolve_audio_path

    if not records:
        raise ContractError("empty manifest")

    def load(record):
        wave = read_wav(resolve_audio_path(manifest_path, record))
        return log_mel_features(wave, bins=feat_bins, window_ms=window_ms,
                                shift_ms=shift_ms, utterance_id=record.id)

    details: list[dict] = []
    failures: list[str] = []
    total_edits = total_subs = total_dels = total_ins = 0
    total_ref = 0
    total_wall = 0.0
    total_audio = 0.0

    def decode_one(record):
        features = load(record)
        return nar_greedy_decode(features, model, vocab)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_safe(decode_one), records))
    else:
        outcomes = [_safe(decode_one)(r) for r in records]

    for record, outcome in zip(records, outcomes):
        if isinstance(outcome, Exception):
            failures.append(f"{record.id}: {outcome}")
            continue
        stats = cer(record.text, outcome.hypothesis)
        total_edits += stats.distance
        total_subs += stats.substitutions
        total_dels += stats.deletions
        total_ins += stats.insertions
        total_ref += len(record.text)
        total_wall += outcome.wall_time_sec
        total_audio += record.duration_sec
        details.append(
            {
                "id": record.id,
                "reference": record.text,
                "hypothesis": outcome.hypothesis,
                "distance": stats.distance,
                "substitutions": stats.substitutions,
                "deletions": stats.deletions,
                "insertions": stats.insertions,
                "cer": stats.rate,
                "wall_time_sec": outcome.wall_time_sec,
            }
        )

    report = ScoreReport(
        cer=total_edits / total_ref if total_ref else 0.0,
        substitutions=total_subs,
        deletions=total_dels,
        insertions=total_ins,
        rtf=total_wall / total_audio if total_audio else 0.0,
        utterance_count=len(details),
        reference_chars=total_ref,
        failures=failures,
    )
    return report, details


def _safe(fn):
    def wrapped(record):
        try:
            return fn(record)
        except Exception as exc:  # recorded per utterance, run continues
            return exc

    return wrapped


def format_report(report: ScoreReport) -> str:
    rows = [
        ("utterances", str(report.utterance_count)),
        ("reference_chars", str(report.reference_chars)),
        ("cer", f"{report.cer:.4f}"),
        ("substitutions", str(report.substitutions)),
        ("deletions", str(report.deletions)),
        ("insertions", str(report.insertions)),
        ("rtf", f"{report.rtf:.6f}"),
        ("failures", str(len(report.failures))),
    ]
    return "\n".join(f"{k}\t{v}" for k, v in rows)
