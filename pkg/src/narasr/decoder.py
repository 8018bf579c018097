"""Bidirectional transformer decoder in the masked-LM style.

The decoder treats incoming acoustic embeddings as token embeddings: each
input vector is summed with a learned position embedding and a (single)
segment embedding, layer-normed, and passed through post-norm transformer
layers to a per-position classification head. The same stack doubles as a
text-only masked language model for pretraining, using ordinary token
lookup instead of acoustic vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks
from . import tensor as T
from .blocks import NormParams, TransformerLayerParams
from .errors import ConfigError, LengthError
from .tensor import Tensor
from .tokenizer import MASK_ID, SPECIAL_TOKENS, TokenSequence


@dataclass
class DecoderConfig:
    vocab_size: int
    d_n: int = 64
    layers: int = 4
    heads: int = 4
    d_ff: int = 128
    max_positions: int = 64
    dropout: float = 0.1
    activation: str = "relu"

    def __post_init__(self):
        if self.d_n % self.heads != 0:
            raise ConfigError(f"d_n {self.d_n} not divisible by {self.heads} heads")
        if self.vocab_size < 6:
            raise ConfigError("vocabulary must contain the specials plus content tokens")

    @classmethod
    def paper(cls, vocab_size: int = 21128) -> "DecoderConfig":
        return cls(vocab_size=vocab_size, d_n=768, layers=12, heads=12,
                   d_ff=3072, max_positions=512, dropout=0.1)


@dataclass
class DecoderParams:
    config: DecoderConfig
    token_embedding: Tensor      # [V, d_n]
    position_embedding: Tensor   # [max_positions, d_n], learned
    segment_embedding: Tensor    # [2, d_n]
    emb_norm: NormParams
    layers: list[TransformerLayerParams]
    head_W: Tensor               # [d_n, V]
    head_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "decoder.token_embedding": self.token_embedding,
            "decoder.position_embedding": self.position_embedding,
            "decoder.segment_embedding": self.segment_embedding,
            "decoder.emb_norm.gain": self.emb_norm.gain,
            "decoder.emb_norm.bias": self.emb_norm.bias,
            "decoder.head.W": self.head_W,
            "decoder.head.b": self.head_b,
        }
        for i, layer in enumerate(self.layers):
            named.update(blocks.layer_named_tensors(f"decoder.layer.{i}", layer))
        return named

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}


def init_decoder(config: DecoderConfig, rng: np.random.Generator, dtype=np.float64) -> DecoderParams:
    c = config
    return DecoderParams(
        config=c,
        token_embedding=T.normal_init((c.vocab_size, c.d_n), rng, 0.02, dtype),
        position_embedding=T.normal_init((c.max_positions, c.d_n), rng, 0.02, dtype),
        segment_embedding=T.normal_init((2, c.d_n), rng, 0.02, dtype),
        emb_norm=blocks.init_norm(c.d_n, dtype),
        layers=[
            blocks.init_transformer_layer(c.d_n, c.heads, c.d_ff, c.activation, "post", c.dropout, rng, dtype)
            for _ in range(c.layers)
        ],
        head_W=T.normal_init((c.d_n, c.vocab_size), rng, 0.02, dtype),
        head_b=T.zeros((c.vocab_size,), dtype=dtype, requires_grad=True),
    )


def decoder_forward(
    h_f: Tensor,
    params: DecoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Classify every position of an acoustic embedding sequence."""
    return _trunk(h_f, params, training, rng)


def embed_tokens(ids, params: DecoderParams) -> Tensor:
    return T.embedding_lookup(params.token_embedding, ids)


def _trunk(emb: Tensor, params: DecoderParams, training: bool, rng) -> Tensor:
    length = emb.shape[-2]
    if length > params.config.max_positions:
        raise LengthError(
            f"sequence of {length} positions exceeds max_positions {params.config.max_positions}"
        )
    positions = T.embedding_lookup(params.position_embedding, np.arange(length))
    segment = T.embedding_lookup(params.segment_embedding, np.zeros(length, dtype=np.int64))
    x = emb + positions + segment
    x = T.layer_norm(x, params.emb_norm.gain, params.emb_norm.bias, blocks.LN_EPS)
    x = T.dropout(x, params.config.dropout, training, rng)
    for layer in params.layers:
        x = blocks.transformer_layer(x, x, layer, training=training, rng=rng)
    return T.matmul(x, params.head_W) + params.head_b


def mlm_forward(
    ids,
    params: DecoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Text-only path: token lookup instead of acoustic embeddings."""
    return _trunk(embed_tokens(ids, params), params, training, rng)


def mlm_corrupt(
    tokens: TokenSequence, mask_rate: float, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Masked-LM corruption: each non-special position is selected with
    probability mask_rate; selected positions become [MASK] 80% of the
    time, a random vocabulary id 10%, and stay unchanged 10%.

    Returns (corrupted ids, selected positions).
    """
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError(f"mask_rate must be in (0, 1), got {mask_rate}")
    ids = tokens.ids.copy()
    eligible = ids >= len(SPECIAL_TOKENS)
    selected = eligible & (rng.random(len(ids)) < mask_rate)
    positions = np.where(selected)[0]
    for pos in positions:
        u = rng.random()
        if u < 0.8:
            ids[pos] = MASK_ID
        elif u < 0.9:
            ids[pos] = int(rng.integers(0, vocab_size))
    return ids, positions


def classify_positions(logits) -> np.ndarray:
    """Per-position argmax; ties resolve to the lowest token id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1).astype(np.int64)


def mlm_pretrain_step(
    batch: list[TokenSequence],
    params: DecoderParams,
    opt_state,
    mask_rate: float,
    lr: float,
    rng: np.random.Generator,
) -> Optional[float]:
    """One masked-LM update: corrupt, forward, cross-entropy on the selected
    positions only, Adam step. Returns the mean loss per selected position,
    or None when the batch selected nothing (the step is skipped).
    """
    from .optim import adam_step

    length = len(batch[0].ids)
    corrupted = np.zeros((len(batch), length), dtype=np.int64)
    originals = np.zeros((len(batch), length), dtype=np.int64)
    weights = np.zeros((len(batch), length))
    for i, seq in enumerate(batch):
        ids, positions = mlm_corrupt(seq, mask_rate, rng, params.config.vocab_size)
        corrupted[i] = ids
        originals[i] = seq.ids
        weights[i, positions] = 1.0
    if weights.sum() == 0:
        return None

    trainable = params.trainable_tensors()
    for p in trainable.values():
        p.grad = None
    logits = mlm_forward(corrupted, params, training=True, rng=rng)
    vocab = params.config.vocab_size
    loss = T.label_smoothed_nll(
        T.reshape(logits, (len(batch) * length, vocab)),
        originals.reshape(-1),
        smoothing=0.0,
        weights=weights.reshape(-1),
    )
    loss.backward()
    adam_step(trainable, {k: p.grad for k, p in trainable.items()}, opt_state, lr)
    return loss.item()
