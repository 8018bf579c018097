"""Transformer building blocks: multi-head attention, gated feed-forward
nets, pre-/post-norm residual layers, and sinusoidal position tables.

Layers are stateless functions over parameter dataclasses, so shared
read-only parameters are safe under concurrent forward calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5
MASK_BIAS = -1e9  # large negative stand-in for -inf; exp() underflows to exactly 0


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    heads: int

    def __post_init__(self):
        d = self.W_q.shape[0]
        if d % self.heads != 0:
            raise DimensionError(f"model width {d} not divisible by {self.heads} heads")


@dataclass
class FeedForwardParams:
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor
    activation: str  # "glu" or "relu"

    def __post_init__(self):
        if self.activation not in ("glu", "relu"):
            raise ContractError(f"unknown feed-forward activation {self.activation!r}")
        hidden = self.W_2.shape[0]
        expanded = self.W_1.shape[1]
        need = 2 * hidden if self.activation == "glu" else hidden
        if expanded != need:
            raise DimensionError(
                f"{self.activation} feed-forward needs W_1 width {need}, got {expanded}"
            )


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams
    norm_mode: str  # "pre" or "post"
    dropout_rate: float

    def __post_init__(self):
        if self.norm_mode not in ("pre", "post"):
            raise ContractError(f"unknown norm mode {self.norm_mode!r}")


def sinusoidal_positions(length: int, d_model: int, dtype=np.float64) -> Tensor:
    """Fixed sin/cos position table: even dims sine, odd dims cosine."""
    if d_model % 2 != 0:
        raise DimensionError(f"sinusoidal positions need an even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table.astype(dtype))


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: AttentionParams,
    mask: Optional[np.ndarray] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over `heads` heads.

    Inputs are [L, d] or [B, L, d]. `mask` is boolean with True marking a
    visible key, shaped [L_q, L_kv], [B, L_q, L_kv] or [B, 1, L_kv]; masked
    scores get a -1e9 bias so their weights underflow to exactly zero.
    """
    d = params.W_q.shape[0]
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise DimensionError(
            f"attention width mismatch: inputs {q_in.shape}/{kv_in.shape}, params {d}"
        )
    q3, squeeze = _promote(q_in)
    kv3, _ = _promote(kv_in)
    batch, L_q = q3.shape[0], q3.shape[1]
    L_kv = kv3.shape[1]
    heads, dh = params.heads, d // params.heads

    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ContractError("attention mask leaves at least one query row fully masked")

    def split(x: Tensor, w: Tensor, length: int) -> Tensor:
        proj = T.matmul(x, w)
        return T.transpose(T.reshape(proj, (batch, length, heads, dh)), (0, 2, 1, 3))

    q = split(q3, params.W_q, L_q)
    k = split(kv3, params.W_k, L_kv)
    v = split(kv3, params.W_v, L_kv)

    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        bias = np.where(mask, 0.0, MASK_BIAS)
        if bias.ndim == 2:
            bias = bias[None, None]
        else:
            bias = bias[:, None]
        scores = scores + bias.astype(scores.data.dtype)
    weights = T.softmax(scores, axis=-1)
    mixed = T.matmul(weights, v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (batch, L_q, d))
    out = T.matmul(merged, params.W_o)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_weights:
        return out, weights.data
    return out


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    h = T.matmul(x, params.W_1) + params.b_1
    h = T.glu(h) if params.activation == "glu" else T.relu(h)
    return T.matmul(h, params.W_2) + params.b_2


def transformer_layer(
    q_in: Tensor,
    kv_in: Tensor,
    params: TransformerLayerParams,
    mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """One residual attention + feed-forward block.

    Self-attention is the special case ``kv_in is q_in``. Pre-norm applies
    the norms inside the residual branches; post-norm applies them after
    the residual additions.
    """

    def drop(t: Tensor) -> Tensor:
        return T.dropout(t, params.dropout_rate, training, rng)

    if params.norm_mode == "pre":
        nq = T.layer_norm(q_in, params.norm1.gain, params.norm1.bias, LN_EPS)
        nkv = nq if kv_in is q_in else T.layer_norm(kv_in, params.norm1.gain, params.norm1.bias, LN_EPS)
        x = q_in + drop(multi_head_attention(nq, nkv, params.attn, mask))
        h = T.layer_norm(x, params.norm2.gain, params.norm2.bias, LN_EPS)
        return x + drop(feed_forward(h, params.ffn))

    x = q_in + drop(multi_head_attention(q_in, kv_in, params.attn, mask))
    x = T.layer_norm(x, params.norm1.gain, params.norm1.bias, LN_EPS)
    h = x + drop(feed_forward(x, params.ffn))
    return T.layer_norm(h, params.norm2.gain, params.norm2.bias, LN_EPS)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def init_norm(d: int, dtype=np.float64) -> NormParams:
    return NormParams(gain=T.ones((d,), dtype=dtype, requires_grad=True),
                      bias=T.zeros((d,), dtype=dtype, requires_grad=True))


def init_attention(d_model: int, heads: int, rng: np.random.Generator, dtype=np.float64) -> AttentionParams:
    return AttentionParams(
        W_q=T.xavier_uniform((d_model, d_model), rng, dtype),
        W_k=T.xavier_uniform((d_model, d_model), rng, dtype),
        W_v=T.xavier_uniform((d_model, d_model), rng, dtype),
        W_o=T.xavier_uniform((d_model, d_model), rng, dtype),
        heads=heads,
    )


def init_feed_forward(
    d_model: int, d_ff: int, activation: str, rng: np.random.Generator, dtype=np.float64
) -> FeedForwardParams:
    expanded = 2 * d_ff if activation == "glu" else d_ff
    return FeedForwardParams(
        W_1=T.xavier_uniform((d_model, expanded), rng, dtype),
        b_1=T.zeros((expanded,), dtype=dtype, requires_grad=True),
        W_2=T.xavier_uniform((d_ff, d_model), rng, dtype),
        b_2=T.zeros((d_model,), dtype=dtype, requires_grad=True),
        activation=activation,
    )


def init_transformer_layer(
    d_model: int,
    heads: int,
    d_ff: int,
    activation: str,
    norm_mode: str,
    dropout_rate: float,
    rng: np.random.Generator,
    dtype=np.float64,
) -> TransformerLayerParams:
    return TransformerLayerParams(
        attn=init_attention(d_model, heads, rng, dtype),
        ffn=init_feed_forward(d_model, d_ff, activation, rng, dtype),
        norm1=init_norm(d_model, dtype),
        norm2=init_norm(d_model, dtype),
        norm_mode=norm_mode,
        dropout_rate=dropout_rate,
    )


def layer_named_tensors(prefix: str, layer: TransformerLayerParams) -> dict[str, Tensor]:
    return {
        f"{prefix}.attn.W_q": layer.attn.W_q,
        f"{prefix}.attn.W_k": layer.attn.W_k,
        f"{prefix}.attn.W_v": layer.attn.W_v,
        f"{prefix}.attn.W_o": layer.attn.W_o,
        f"{prefix}.ffn.W_1": layer.ffn.W_1,
        f"{prefix}.ffn.b_1": layer.ffn.b_1,
        f"{prefix}.ffn.W_2": layer.ffn.W_2,
        f"{prefix}.ffn.b_2": layer.ffn.b_2,
        f"{prefix}.norm1.gain": layer.norm1.gain,
        f"{prefix}.norm1.bias": layer.norm1.bias,
        f"{prefix}.norm2.gain": layer.norm2.gain,
        f"{prefix}.norm2.bias": layer.norm2.bias,
    }
