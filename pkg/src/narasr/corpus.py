"""Synthetic tone-language corpus, JSON-lines manifests, corpus statistics,
and duration-budgeted batching.

Each vocabulary token maps to a fixed sinusoid (semitone steps above a base
frequency); an utterance is the concatenation of its token tones plus
seeded noise, so recognition is learnable end to end at desk scale while
remaining non-trivial under the mel frontend.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .frontend import Waveform, write_wav

MANIFEST_FIELDS = ("id", "audio_path", "duration_sec", "text")


@dataclass
class UtteranceRecord:
    id: str
    audio_path: str
    duration_sec: float
    text: str

    def __post_init__(self):
        if self.duration_sec <= 0:
            raise ConfigError(f"utterance {self.id}: duration must be positive")


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 16
    tokens_min: int = 4
    tokens_max: int = 10
    tone_base_hz: float = 440.0
    tone_step_ratio: float = 2 ** (1 / 12)
    token_duration_ms: float = 120.0
    noise_amplitude: float = 0.01
    sample_rate: int = 16000
    train_count: int = 800
    dev_count: int = 100
    test_count: int = 100

    def __post_init__(self):
        top = self.tone_base_hz * self.tone_step_ratio ** (self.vocab_size - 1)
        if top >= self.sample_rate / 2:
            raise ConfigError(
                f"tone_base_hz: highest tone {top:.1f} Hz reaches the "
                f"{self.sample_rate / 2:.0f} Hz Nyquist limit"
            )
        if self.vocab_size < 1 or self.vocab_size > 26:
            raise ConfigError("vocab_size must be between 1 and 26 (one letter per token)")
        if self.tokens_min < 1 or self.tokens_max < self.tokens_min:
            raise ConfigError("tokens_min/tokens_max must satisfy 1 <= min <= max")

    def token_char(self, k: int) -> str:
        return chr(ord("a") + k)

    def token_freq(self, k: int) -> float:
        return self.tone_base_hz * self.tone_step_ratio ** k


def _utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    digest = hashlib.sha256(utt_id.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")]))


def synthesize_utterance(spec: SyntheticTaskSpec, seed: int, utt_id: str) -> tuple[Waveform, str]:
    """Deterministic function of (spec, seed, id): draws the token string,
    renders each token's tone, and adds seeded noise."""
    rng = _utterance_rng(seed, utt_id)
    n_tokens = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
    tokens = rng.integers(0, spec.vocab_size, size=n_tokens)
    samples_per_token = int(round(spec.sample_rate * spec.token_duration_ms / 1000.0))
    t = np.arange(samples_per_token) / spec.sample_rate
    pieces = [0.3 * np.sin(2 * math.pi * spec.token_freq(int(k)) * t) for k in tokens]
    signal = np.concatenate(pieces)
    signal = signal + spec.noise_amplitude * rng.standard_normal(len(signal))
    text = "".join(spec.token_char(int(k)) for k in tokens)
    return Waveform(samples=signal, sample_rate=spec.sample_rate), text


def generate_synthetic_corpus(spec: SyntheticTaskSpec, seed: int, out_dir) -> dict[str, Path]:
    """Write WAVs plus one manifest per split; returns manifest paths."""
    out = Path(out_dir)
    manifests: dict[str, Path] = {}
    for split, count in (("train", spec.train_count), ("dev", spec.dev_count), ("test", spec.test_count)):
        records = []
        for i in range(count):
            utt_id = f"{split}-{i:05d}"
            wave, text = synthesize_utterance(spec, seed, utt_id)
            rel_path = f"wav/{utt_id}.wav"
            write_wav(out / rel_path, wave)
            records.append(
                UtteranceRecord(
                    id=utt_id,
                    audio_path=rel_path,
                    duration_sec=len(wave.samples) / spec.sample_rate,
                    text=text,
                )
            )
        manifest_path = out / f"{split}.jsonl"
        write_manifest(manifest_path, records)
        manifests[split] = manifest_path
    return manifests


def write_manifest(path, records: list[UtteranceRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for r in records:
            handle.write(
                json.dumps(
                    {"id": r.id, "audio_path": r.audio_path, "duration_sec": r.duration_sec, "text": r.text},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_manifest(path) -> list[UtteranceRecord]:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                record = UtteranceRecord(
                    id=row["id"],
                    audio_path=row["audio_path"],
                    duration_sec=float(row["duration_sec"]),
                    text=row["text"],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: malformed manifest row at line {line_no}: {exc}") from exc
            if record.id in seen:
                raise ConfigError(f"{path}: duplicate utterance id {record.id} at line {line_no}")
            seen.add(record.id)
            records.append(record)
    return records


def resolve_audio_path(manifest_path, record: UtteranceRecord) -> Path:
    """audio_path entries are relative to the manifest's directory."""
    p = Path(record.audio_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


@dataclass
class CorpusStats:
    utterances: int
    hours: float
    speakers: str  # not tracked in synthetic manifests
    duration_min: float
    duration_max: float
    duration_avg: float
    tokens_min: float
    tokens_max: float
    tokens_avg: float


def corpus_stats(records: list[UtteranceRecord]) -> CorpusStats:
    if not records:
        raise ConfigError("empty manifest")
    durations = np.array([r.duration_sec for r in records])
    tokens = np.array([len(r.text) for r in records])
    return CorpusStats(
        utterances=len(records),
        hours=float(durations.sum() / 3600.0),
        speakers="n/a",
        duration_min=float(durations.min()),
        duration_max=float(durations.max()),
        duration_avg=float(durations.mean()),
        tokens_min=float(tokens.min()),
        tokens_max=float(tokens.max()),
        tokens_avg=float(tokens.mean()),
    )


def format_stats(stats: CorpusStats) -> str:
    rows = [
        ("#Utterances", f"{stats.utterances}"),
        ("#Hours", f"{stats.hours:.4f}"),
        ("#Speakers", stats.speakers),
        ("Duration (Sec.) Min.", f"{stats.duration_min:.2f}"),
        ("Duration (Sec.) Max.", f"{stats.duration_max:.2f}"),
        ("Duration (Sec.) Avg.", f"{stats.duration_avg:.2f}"),
        ("#Tokens/Sentence Min.", f"{stats.tokens_min:.1f}"),
        ("#Tokens/Sentence Max.", f"{stats.tokens_max:.1f}"),
        ("#Tokens/Sentence Avg.", f"{stats.tokens_avg:.1f}"),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label.ljust(width)}\t{value}" for label, value in rows)


def batch_by_duration(records: list[UtteranceRecord], budget_seconds: float, seed: int) -> list[list[UtteranceRecord]]:
    """Sort by duration, pack greedily under the budget, then shuffle the
    batch order; every utterance appears exactly once."""
    for r in records:
        if r.duration_sec > budget_seconds:
            raise ConfigError(
                f"utterance {r.id} ({r.duration_sec:.2f}s) exceeds the {budget_seconds:.2f}s batch budget"
            )
    ordered = sorted(records, key=lambda r: (r.duration_sec, r.id))
    batches: list[list[UtteranceRecord]] = []
    current: list[UtteranceRecord] = []
    current_total = 0.0
    for r in ordered:
        if current and current_total + r.duration_sec > budget_seconds:
            batches.append(current)
            current = []
            current_total = 0.0
        current.append(r)
        current_total += r.duration_sec
    if current:
        batches.append(current)
    order = np.random.default_rng(seed).permutation(len(batches))
    return [batches[i] for i in order]
