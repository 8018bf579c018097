"""Waveform I/O, log-Mel filterbank features, and SpecAugment masking.

Conventions fixed here for reproducibility: Hann window, FFT size the next
power of two at or above the window, triangular mel filters spanning 0 Hz
to Nyquist, natural log with a 1e-10 floor, no pre-emphasis and no
mean/variance normalization.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LengthError
from .tensor import Tensor

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.isfinite(self.samples).all():
            raise ConfigError("waveform contains non-finite samples")

    @property
    def duration_sec(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    frames: Tensor  # [T, F]
    frame_shift_ms: float
    utterance_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SpecAugmentPolicy:
    freq_mask_width_max: int = 0
    freq_masks: int = 0
    time_mask_width_max: int = 0
    time_masks: int = 0

    def __post_init__(self):
        for name in ("freq_mask_width_max", "freq_masks", "time_mask_width_max", "time_masks"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def read_wav(path) -> Waveform:
    """Read a single-channel 16-bit little-endian PCM WAV file."""
    with wave.open(str(path), "rb") as handle:
        if handle.getnchannels() != 1:
            raise ConfigError(f"{path}: expected mono audio, got {handle.getnchannels()} channels")
        if handle.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected 16-bit samples, got {8 * handle.getsampwidth()}-bit")
        rate = handle.getframerate()
        raw = handle.readframes(handle.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path, w: Waveform) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    quantized = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(w.sample_rate)
        handle.writeframes(quantized.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(bins: int, sample_rate: int, n_fft: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular mel filters from 0 Hz to Nyquist.

    Returns (weights [bins, n_fft//2 + 1], center frequencies in Hz).
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), bins + 2)
    hz_points = mel_to_hz(mel_points)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    weights = np.zeros((bins, len(freqs)))
    for b in range(bins):
        lower, center, upper = hz_points[b], hz_points[b + 1], hz_points[b + 2]
        up = (freqs - lower) / (center - lower)
        down = (upper - freqs) / (upper - center)
        weights[b] = np.maximum(0.0, np.minimum(up, down))
    return weights, hz_points[1:-1]


def num_frames(n_samples: int, window: int, shift: int) -> int:
    return 1 + (n_samples - window) // shift


def log_mel_features(
    w: Waveform,
    bins: int = 80,
    window_ms: float = 25.0,
    shift_ms: float = 10.0,
    utterance_id: str = "",
) -> FeatureSequence:
    """Frame the signal, apply a Hann window, and project the magnitude
    spectrum through a triangular mel filterbank, in natural log."""
    window = int(round(w.sample_rate * window_ms / 1000.0))
    shift = int(round(w.sample_rate * shift_ms / 1000.0))
    if len(w.samples) < window:
        raise LengthError(
            f"signal of {len(w.samples)} samples is shorter than one {window}-sample window"
        )
    frames_count = num_frames(len(w.samples), window, shift)
    starts = np.arange(frames_count) * shift
    framed = np.lib.stride_tricks.sliding_window_view(w.samples, window)[starts]
    hann = np.hanning(window)
    n_fft = 1 << (window - 1).bit_length()
    spectrum = np.abs(np.fft.rfft(framed * hann, n=n_fft, axis=1))
    weights, _ = mel_filterbank(bins, w.sample_rate, n_fft)
    energy = spectrum @ weights.T
    feats = np.log(np.maximum(energy, LOG_FLOOR))
    return FeatureSequence(frames=Tensor(feats), frame_shift_ms=shift_ms, utterance_id=utterance_id)


def spec_augment(f: FeatureSequence, policy: SpecAugmentPolicy, rng: np.random.Generator) -> FeatureSequence:
    """Zero out random frequency bands and time spans; widths are drawn
    uniformly from [0, width_max] and only the chosen cells change."""
    frames = f.frames.data
    n_t, n_f = frames.shape
    if policy.freq_mask_width_max > n_f:
        raise ConfigError(
            f"freq_mask_width_max {policy.freq_mask_width_max} exceeds {n_f} mel bins"
        )
    if policy.time_mask_width_max > n_t:
        raise ConfigError(
            f"time_mask_width_max {policy.time_mask_width_max} exceeds {n_t} frames"
        )
    out = frames.copy()
    for _ in range(policy.freq_masks):
        width = int(rng.integers(0, policy.freq_mask_width_max + 1))
        if width:
            start = int(rng.integers(0, n_f - width + 1))
            out[:, start : start + width] = 0.0
    for _ in range(policy.time_masks):
        width = int(rng.integers(0, policy.time_mask_width_max + 1))
        if width:
            start = int(rng.integers(0, n_t - width + 1))
            out[start : start + width, :] = 0.0
    return FeatureSequence(frames=Tensor(out), frame_shift_ms=f.frame_shift_ms, utterance_id=f.utterance_id)
