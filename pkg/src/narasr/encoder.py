"""Acoustic encoder: CNN subsampling, self-attention over frames, fixed
sinusoidal queries that map any frame count to exactly `query_count` slots,
a refinement stack over the same frame keys, a second self-attention stack,
and a final width projection.

All stages accept [T, F] (single utterance) or [B, T, F] (padded batch with
per-utterance frame lengths); padded frames are masked out of every
attention so batching is semantics-preserving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import blocks
from . import tensor as T
from .blocks import TransformerLayerParams
from .errors import ConfigError, DimensionError
from .frontend import FeatureSequence
from .tensor import Tensor


@dataclass
class EncoderConfig:
    d_m: int = 64
    d_n: int = 64
    feat_dim: int = 80
    cnn_filters: int = 8
    kernel: int = 3
    self_attn_layers_pre: int = 2
    refine_layers: int = 1  # cross-attention layers after the initial alignment layer
    self_attn_layers_post: int = 2
    heads: int = 4
    d_ff: int = 128
    query_count: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_m % self.heads != 0:
            raise ConfigError(f"d_m {self.d_m} not divisible by {self.heads} heads")
        if self.refine_layers < 0:
            raise ConfigError("refine_layers must be >= 0")
        for name in ("self_attn_layers_pre", "self_attn_layers_post", "query_count",
                     "cnn_filters", "kernel", "d_m", "d_n", "d_ff", "feat_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls(
            d_m=256, d_n=768, feat_dim=80, cnn_filters=32, kernel=3,
            self_attn_layers_pre=6, refine_layers=3, self_attn_layers_post=6,
            heads=8, d_ff=2048, query_count=60, dropout=0.1,
        )


@dataclass
class EncoderParams:
    config: EncoderConfig
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    input_proj_W: Tensor
    input_proj_b: Tensor
    pre_layers: list[TransformerLayerParams]
    align_layers: list[TransformerLayerParams]
    post_layers: list[TransformerLayerParams]
    query_table: Tensor  # frozen sinusoidal anchors [query_count, d_m]
    out_proj_W: Tensor
    out_proj_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "encoder.cnn.1.w": self.conv1_w,
            "encoder.cnn.1.b": self.conv1_b,
            "encoder.cnn.2.w": self.conv2_w,
            "encoder.cnn.2.b": self.conv2_b,
            "encoder.cnn.proj.W": self.input_proj_W,
            "encoder.cnn.proj.b": self.input_proj_b,
            "encoder.query_table": self.query_table,
            "encoder.out_proj.W": self.out_proj_W,
            "encoder.out_proj.b": self.out_proj_b,
        }
        for group, layers in (("pre", self.pre_layers), ("align", self.align_layers), ("post", self.post_layers)):
            for i, layer in enumerate(layers):
                named.update(blocks.layer_named_tensors(f"encoder.{group}.{i}", layer))
        return named

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}


def init_encoder(config: EncoderConfig, rng: np.random.Generator, dtype=np.float64) -> EncoderParams:
    c = config
    f4 = subsampled_length(subsampled_length(c.feat_dim))
    make_layer = lambda mode: blocks.init_transformer_layer(  # noqa: E731
        c.d_m, c.heads, c.d_ff, "glu", mode, c.dropout, rng, dtype
    )
    return EncoderParams(
        config=c,
        conv1_w=T.xavier_uniform((c.cnn_filters, 1, c.kernel, c.kernel), rng, dtype),
        conv1_b=T.zeros((c.cnn_filters,), dtype=dtype, requires_grad=True),
        conv2_w=T.xavier_uniform((c.cnn_filters, c.cnn_filters, c.kernel, c.kernel), rng, dtype),
        conv2_b=T.zeros((c.cnn_filters,), dtype=dtype, requires_grad=True),
        input_proj_W=T.xavier_uniform((c.cnn_filters * f4, c.d_m), rng, dtype),
        input_proj_b=T.zeros((c.d_m,), dtype=dtype, requires_grad=True),
        pre_layers=[make_layer("pre") for _ in range(c.self_attn_layers_pre)],
        align_layers=[make_layer("pre") for _ in range(1 + c.refine_layers)],
        post_layers=[make_layer("pre") for _ in range(c.self_attn_layers_post)],
        query_table=blocks.sinusoidal_positions(c.query_count, c.d_m, dtype),
        out_proj_W=T.xavier_uniform((c.d_m, c.d_n), rng, dtype),
        out_proj_b=T.zeros((c.d_n,), dtype=dtype, requires_grad=True),
    )


def subsampled_length(t: int) -> int:
    """Frame count after one stride-2 layer: ceil(t / 2)."""
    return -(-t // 2)


def output_frame_count(t: int) -> int:
    """Frame count after both stride-2 layers: ceil(ceil(t/2)/2)."""
    return subsampled_length(subsampled_length(t))


def _as_batch(frames) -> tuple[Tensor, bool]:
    x = frames.frames if isinstance(frames, FeatureSequence) else frames
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [T, F] or [B, T, F] features, got {x.shape}")
    return x, False


def _valid_mask(lengths: Optional[np.ndarray], count: int, reduce_twice: bool) -> Optional[np.ndarray]:
    if lengths is None:
        return None
    ls = np.asarray(lengths, dtype=np.int64)
    if reduce_twice:
        ls = np.array([output_frame_count(int(t)) for t in ls])
    return np.arange(count)[None, :] < ls[:, None]  # [B, count]


def subsample_cnn(frames, params: EncoderParams, lengths: Optional[np.ndarray] = None) -> Tensor:
    """Two stride-2 convolutions over the time/frequency plane, then a
    linear map of the flattened channels to d_m per time step."""
    x, squeeze = _as_batch(frames)
    batch, t_in, f_in = x.shape
    image = T.reshape(x, (batch, 1, t_in, f_in))

    h = T.conv2d(image, params.conv1_w, stride=2, padding="same")
    h = T.relu(h + params.conv1_b.data.reshape(1, -1, 1, 1))
    if lengths is not None:
        keep = _valid_mask(np.ceil(np.asarray(lengths) / 2).astype(np.int64), h.shape[2], False)
        h = h * keep[:, None, :, None].astype(h.data.dtype)
    h = T.conv2d(h, params.conv2_w, stride=2, padding="same")
    h = T.relu(h + params.conv2_b.data.reshape(1, -1, 1, 1))
    if lengths is not None:
        keep = _valid_mask(lengths, h.shape[2], True)
        h = h * keep[:, None, :, None].astype(h.data.dtype)

    t4 = h.shape[2]
    h = T.transpose(h, (0, 2, 1, 3))  # [B, T4, C, F4]
    h = T.reshape(h, (batch, t4, h.shape[2] * h.shape[3]))
    out = T.matmul(h, params.input_proj_W) + params.input_proj_b
    return T.reshape(out, out.shape[1:]) if squeeze else out


def encode_acoustic(
    frames,
    params: EncoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    lengths: Optional[np.ndarray] = None,
) -> Tensor:
    """Subsample, add sinusoidal positions, and run the first self-attention
    stack; yields one vector per subsampled frame."""
    h, squeeze = _maybe_batch(subsample_cnn(frames, params, lengths))
    t4 = h.shape[1]
    h = h + blocks.sinusoidal_positions(t4, params.config.d_m, h.data.dtype).data
    mask = _valid_mask(lengths, t4, True)
    attn_mask = mask[:, None, :] if mask is not None else None
    for layer in params.pre_layers:
        h = blocks.transformer_layer(h, h, layer, mask=attn_mask, training=training, rng=rng)
    return T.reshape(h, h.shape[1:]) if squeeze else h


def _maybe_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def align_queries(
    h_a: Tensor,
    params: EncoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    lengths: Optional[np.ndarray] = None,
) -> Tensor:
    """Cross-attend the fixed query anchors over the frame sequence, then
    refine with further cross-attention layers whose keys/values stay on
    the frame sequence; output length is always query_count."""
    kv, squeeze = _maybe_batch(h_a)
    batch, t4 = kv.shape[0], kv.shape[1]
    mask = _valid_mask(lengths, t4, True)
    attn_mask = mask[:, None, :] if mask is not None else None
    queries = T.reshape(params.query_table, (1,) + params.query_table.shape)
    q = Tensor(np.broadcast_to(queries.data, (batch,) + params.query_table.shape).copy())
    for layer in params.align_layers:
        q = blocks.transformer_layer(q, kv, layer, mask=attn_mask, training=training, rng=rng)
    return T.reshape(q, q.shape[1:]) if squeeze else q


def final_embeddings(
    h_p: Tensor,
    params: EncoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Second self-attention stack over the aligned slots, then the affine
    projection from d_m to the decoder width d_n."""
    h, squeeze = _maybe_batch(h_p)
    for layer in params.post_layers:
        h = blocks.transformer_layer(h, h, layer, training=training, rng=rng)
    out = T.matmul(h, params.out_proj_W) + params.out_proj_b
    return T.reshape(out, out.shape[1:]) if squeeze else out


def encoder_forward(
    frames,
    params: EncoderParams,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    lengths: Optional[np.ndarray] = None,
) -> Tensor:
    h_a = encode_acoustic(frames, params, training=training, rng=rng, lengths=lengths)
    h_p = align_queries(h_a, params, training=training, rng=rng, lengths=lengths)
    return final_embeddings(h_p, params, training=training, rng=rng)
