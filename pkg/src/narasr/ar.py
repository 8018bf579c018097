"""Autoregressive decoder baseline: causal self-attention plus
cross-attention over the frame sequence, decoded token by token.

Greedy decoding deliberately re-runs the full prefix at every step (no
key/value caching), so the measured latency reflects the naive sequential
cost the parallel decoder is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks
from . import tensor as T
from .blocks import AttentionParams, FeedForwardParams, NormParams
from .errors import ConfigError
from .tensor import Tensor
from .tokenizer import CLS_ID, SEP_ID


@dataclass
class ArConfig:
    vocab_size: int
    d_m: int = 64
    layers: int = 4
    heads: int = 4
    d_ff: int = 128
    max_len: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_m % self.heads != 0:
            raise ConfigError(f"d_m {self.d_m} not divisible by {self.heads} heads")


@dataclass
class ArLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams
    dropout_rate: float


@dataclass
class ARDecoderParams:
    config: ArConfig
    token_embedding: Tensor  # [V, d_m]
    layers: list[ArLayerParams]
    head_W: Tensor
    head_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "ar.token_embedding": self.token_embedding,
            "ar.head.W": self.head_W,
            "ar.head.b": self.head_b,
        }
        for i, layer in enumerate(self.layers):
            prefix = f"ar.layer.{i}"
            for tag, attn in (("self_attn", layer.self_attn), ("cross_attn", layer.cross_attn)):
                named[f"{prefix}.{tag}.W_q"] = attn.W_q
                named[f"{prefix}.{tag}.W_k"] = attn.W_k
                named[f"{prefix}.{tag}.W_v"] = attn.W_v
                named[f"{prefix}.{tag}.W_o"] = attn.W_o
            named[f"{prefix}.ffn.W_1"] = layer.ffn.W_1
            named[f"{prefix}.ffn.b_1"] = layer.ffn.b_1
            named[f"{prefix}.ffn.W_2"] = layer.ffn.W_2
            named[f"{prefix}.ffn.b_2"] = layer.ffn.b_2
            for j, norm in enumerate((layer.norm1, layer.norm2, layer.norm3), start=1):
                named[f"{prefix}.norm{j}.gain"] = norm.gain
                named[f"{prefix}.norm{j}.bias"] = norm.bias
        return named

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}


def init_ar_decoder(config: ArConfig, rng: np.random.Generator, dtype=np.float64) -> ARDecoderParams:
    c = config

    def make_layer():
        return ArLayerParams(
            self_attn=blocks.init_attention(c.d_m, c.heads, rng, dtype),
            cross_attn=blocks.init_attention(c.d_m, c.heads, rng, dtype),
            ffn=blocks.init_feed_forward(c.d_m, c.d_ff, "relu", rng, dtype),
            norm1=blocks.init_norm(c.d_m, dtype),
            norm2=blocks.init_norm(c.d_m, dtype),
            norm3=blocks.init_norm(c.d_m, dtype),
            dropout_rate=c.dropout,
        )

    return ARDecoderParams(
        config=c,
        token_embedding=T.normal_init((c.vocab_size, c.d_m), rng, 0.02, dtype),
        layers=[make_layer() for _ in range(c.layers)],
        head_W=T.normal_init((c.d_m, c.vocab_size), rng, 0.02, dtype),
        head_b=T.zeros((c.vocab_size,), dtype=dtype, requires_grad=True),
    )


def causal_mask(n: int) -> np.ndarray:
    """Position i sees keys j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def ar_forward(
    tokens_in,
    h_a: Tensor,
    params: ARDecoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    h_a_lengths: Optional[np.ndarray] = None,
) -> Tensor:
    """Teacher-forced logits: position i depends only on tokens < i + 1 and
    the frame sequence."""
    ids = np.asarray(tokens_in, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    kv = h_a if h_a.ndim == 3 else T.reshape(h_a, (1,) + h_a.shape)
    n = ids.shape[1]
    c = params.config

    x = T.embedding_lookup(params.token_embedding, ids)
    x = x + blocks.sinusoidal_positions(n, c.d_m, x.data.dtype).data
    self_mask = causal_mask(n)
    cross_mask = None
    if h_a_lengths is not None:
        cross_mask = (np.arange(kv.shape[1])[None, :] < np.asarray(h_a_lengths)[:, None])[:, None, :]

    def drop(t: Tensor) -> Tensor:
        return T.dropout(t, params.config.dropout, training, rng)

    for layer in params.layers:
        a = blocks.multi_head_attention(x, x, layer.self_attn, mask=self_mask)
        x = T.layer_norm(x + drop(a), layer.norm1.gain, layer.norm1.bias, blocks.LN_EPS)
        a = blocks.multi_head_attention(x, kv, layer.cross_attn, mask=cross_mask)
        x = T.layer_norm(x + drop(a), layer.norm2.gain, layer.norm2.bias, blocks.LN_EPS)
        f = blocks.feed_forward(x, layer.ffn)
        x = T.layer_norm(x + drop(f), layer.norm3.gain, layer.norm3.bias, blocks.LN_EPS)

    logits = T.matmul(x, params.head_W) + params.head_b
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def ar_greedy_decode(
    h_a: Tensor,
    params: ARDecoderParams,
    max_len: int,
    step_counter: Optional[list] = None,
) -> np.ndarray:
    """Grow the hypothesis one argmax token at a time, re-running the full
    prefix each step; stops at [SEP] or at max_len total tokens."""
    ids = [CLS_ID]
    with T.no_grad():
        while len(ids) < max_len:
            logits = ar_forward(np.asarray(ids), h_a, params)
            if step_counter is not None:
                step_counter.append(1)
            next_id = int(np.argmax(logits.data[-1]))
            ids.append(next_id)
            if next_id == SEP_ID:
                break
    return np.asarray(ids, dtype=np.int64)
