"""Character-level tokenizer with fixed special ids and fixed-length output.

[PAD]=0 so attention and loss masks can be derived from nonzero tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, LengthError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


class Vocabulary:
    """Bijective token <-> id map with the five specials at ids 0..4."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with the five special tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.token_of = list(tokens)
        self.id_of = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.token_of) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Specials first, then distinct characters in first-appearance order."""
    tokens = list(SPECIAL_TOKENS)
    seen = set(tokens)
    empty = True
    for text in corpus:
        empty = False
        for ch in text:
            if ch not in seen:
                seen.add(ch)
                tokens.append(ch)
    if empty:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tokens)


@dataclass
class TokenSequence:
    """Fixed-length id array: [CLS] content [SEP] then [PAD] to the end."""

    ids: np.ndarray
    true_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.true_length
        if n < 2:
            raise ConfigError(f"true_length must be at least 2, got {n}")
        if self.ids[0] != CLS_ID or self.ids[n - 1] != SEP_ID:
            raise ConfigError("token sequence must start with [CLS] and end content with [SEP]")
        if (self.ids[n:] != PAD_ID).any():
            raise ConfigError("positions past true_length must be [PAD]")

    def __len__(self) -> int:
        return len(self.ids)


def encode(text: str, vocab: Vocabulary, target_len: int) -> TokenSequence:
    if len(text) > target_len - 2:
        raise LengthError(
            f"transcript of {len(text)} characters needs {len(text) + 2} slots, "
            f"but the fixed length is {target_len}"
        )
    ids = np.full(target_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    for i, ch in enumerate(text):
        ids[1 + i] = vocab.id_of.get(ch, UNK_ID)
    ids[1 + len(text)] = SEP_ID
    return TokenSequence(ids=ids, true_length=len(text) + 2)


def decode(ids, vocab: Vocabulary) -> str:
    """Concatenate non-special tokens, stopping at the first [SEP]."""
    out = []
    for raw in np.asarray(ids).tolist():
        i = int(raw)
        if i < 0 or i >= len(vocab):
            raise IndexError(f"token id {i} out of range for vocabulary of {len(vocab)}")
        if i == SEP_ID:
            break
        if i >= len(SPECIAL_TOKENS):
            out.append(vocab.token_of[i])
    return "".join(out)
