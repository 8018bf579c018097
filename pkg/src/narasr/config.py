"""Flat key=value run configuration with defaults, file loading, and flag
overrides. '#' starts a comment; later sources win (defaults < file < CLI).

This module stays NumPy-free so the CLI can parse configuration and set
thread environment variables before any numeric import happens.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict[str, str] = {
    # data / features
    "data.train_manifest": "",
    "data.dev_manifest": "",
    "data.test_manifest": "",
    "data.vocab": "",
    "feat.bins": "80",
    "feat.window_ms": "25.0",
    "feat.shift_ms": "10.0",
    # SpecAugment (0 masks disables)
    "augment.freq_mask_width": "8",
    "augment.freq_masks": "1",
    "augment.time_mask_width": "6",
    "augment.time_masks": "1",
    # encoder
    "encoder.d_m": "64",
    "encoder.d_n": "64",
    "encoder.cnn_filters": "8",
    "encoder.kernel": "3",
    "encoder.pre_layers": "2",
    "encoder.refine_layers": "1",
    "encoder.post_layers": "2",
    "encoder.heads": "4",
    "encoder.d_ff": "128",
    "encoder.query_count": "16",
    "encoder.dropout": "0.1",
    # decoder
    "decoder.layers": "4",
    "decoder.heads": "4",
    "decoder.d_ff": "128",
    "decoder.max_positions": "64",
    "decoder.dropout": "0.1",
    # sequential baseline (depth/width follow the decoder for fair timing)
    "ar.layers": "4",
    "ar.heads": "4",
    "ar.d_ff": "128",
    "ar.dropout": "0.1",
    # training
    "train.epochs": "15",
    "train.mlm_epochs": "10",
    "train.batch_seconds": "20.0",
    "train.accumulation": "1",
    "train.label_smoothing": "0.1",
    "train.warmup_steps": "400",
    "train.seed": "0",
    "train.include_pad_loss": "true",
    "train.mlm_mask_rate": "0.15",
    "train.mlm_batch_size": "32",
    "train.out_dir": "runs",
    "train.mlm_checkpoint": "",
    "train.encoder_checkpoint": "",
    "train.decoder_checkpoint": "",
    "train.dtype": "float32",
}


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {line_no} is not a key=value pair: {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class RunConfig:
    """Merged view over defaults, an optional file, and CLI overrides."""

    def __init__(self, file_path=None, overrides: dict[str, str] | None = None):
        self.values = dict(DEFAULTS)
        if file_path:
            file_values = parse_config_file(file_path)
            self._check_keys(file_values, source=str(file_path))
            self.values.update(file_values)
        if overrides:
            self._check_keys(overrides, source="command line")
            self.values.update(overrides)

    def _check_keys(self, new_values: dict[str, str], source: str) -> None:
        unknown = sorted(set(new_values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{source}: unknown configuration key {unknown[0]!r}")

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from exc

    def get_bool(self, key: str) -> bool:
        raw = self.values[key].lower()
        if raw in ("true", "1", "yes"):
            return True
        if raw in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be true or false, got {self.values[key]!r}")

    def require(self, key: str) -> str:
        value = self.values[key]
        if not value:
            raise ConfigError(f"configuration key {key} is required for this command")
        return value

    def canonical_text(self) -> str:
        return "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values)) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    def persist(self, path) -> None:
        """Write the resolved configuration next to the stage outputs so the
        run can be re-executed identically."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.canonical_text(), encoding="utf-8")
