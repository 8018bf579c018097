"""Full-model wrappers: parameter assembly, checkpoint round-trips, and
instrumented forward counters used by the latency benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, get_type_hints

import numpy as np

from . import ar as ar_mod
from . import blocks
from . import decoder as dec
from . import encoder as enc
from .ar import ARDecoderParams, ArConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .decoder import DecoderConfig, DecoderParams
from .encoder import EncoderConfig, EncoderParams
from .errors import CheckpointError
from .tensor import Tensor, no_grad


def config_to_metadata(prefix: str, cfg) -> dict[str, str]:
    return {f"{prefix}.{f.name}": str(getattr(cfg, f.name)) for f in fields(cfg)}


def config_from_metadata(prefix: str, cls, metadata: dict[str, str]):
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key not in metadata:
            raise CheckpointError(f"checkpoint metadata missing {key}")
        raw = metadata[key]
        kind = hints[f.name]
        kwargs[f.name] = kind(raw) if kind is not str else raw
    return cls(**kwargs)


def _grab(tensors: dict[str, np.ndarray], name: str, dtype, requires_grad: bool = True) -> Tensor:
    if name not in tensors:
        raise CheckpointError(f"checkpoint is missing tensor {name}")
    return Tensor(np.ascontiguousarray(tensors[name], dtype=dtype), requires_grad=requires_grad)


def _layer_from_tensors(prefix, tensors, heads, activation, norm_mode, dropout, dtype):
    return blocks.TransformerLayerParams(
        attn=blocks.AttentionParams(
            W_q=_grab(tensors, f"{prefix}.attn.W_q", dtype),
            W_k=_grab(tensors, f"{prefix}.attn.W_k", dtype),
            W_v=_grab(tensors, f"{prefix}.attn.W_v", dtype),
            W_o=_grab(tensors, f"{prefix}.attn.W_o", dtype),
            heads=heads,
        ),
        ffn=blocks.FeedForwardParams(
            W_1=_grab(tensors, f"{prefix}.ffn.W_1", dtype),
            b_1=_grab(tensors, f"{prefix}.ffn.b_1", dtype),
            W_2=_grab(tensors, f"{prefix}.ffn.W_2", dtype),
            b_2=_grab(tensors, f"{prefix}.ffn.b_2", dtype),
            activation=activation,
        ),
        norm1=blocks.NormParams(
            gain=_grab(tensors, f"{prefix}.norm1.gain", dtype),
            bias=_grab(tensors, f"{prefix}.norm1.bias", dtype),
        ),
        norm2=blocks.NormParams(
            gain=_grab(tensors, f"{prefix}.norm2.gain", dtype),
            bias=_grab(tensors, f"{prefix}.norm2.bias", dtype),
        ),
        norm_mode=norm_mode,
        dropout_rate=dropout,
    )


def encoder_params_from_tensors(config: EncoderConfig, tensors: dict[str, np.ndarray], dtype) -> EncoderParams:
    c = config
    return EncoderParams(
        config=c,
        conv1_w=_grab(tensors, "encoder.cnn.1.w", dtype),
        conv1_b=_grab(tensors, "encoder.cnn.1.b", dtype),
        conv2_w=_grab(tensors, "encoder.cnn.2.w", dtype),
        conv2_b=_grab(tensors, "encoder.cnn.2.b", dtype),
        input_proj_W=_grab(tensors, "encoder.cnn.proj.W", dtype),
        input_proj_b=_grab(tensors, "encoder.cnn.proj.b", dtype),
        pre_layers=[
            _layer_from_tensors(f"encoder.pre.{i}", tensors, c.heads, "glu", "pre", c.dropout, dtype)
            for i in range(c.self_attn_layers_pre)
        ],
        align_layers=[
            _layer_from_tensors(f"encoder.align.{i}", tensors, c.heads, "glu", "pre", c.dropout, dtype)
            for i in range(1 + c.refine_layers)
        ],
        post_layers=[
            _layer_from_tensors(f"encoder.post.{i}", tensors, c.heads, "glu", "pre", c.dropout, dtype)
            for i in range(c.self_attn_layers_post)
        ],
        query_table=_grab(tensors, "encoder.query_table", dtype, requires_grad=False),
        out_proj_W=_grab(tensors, "encoder.out_proj.W", dtype),
        out_proj_b=_grab(tensors, "encoder.out_proj.b", dtype),
    )


def decoder_params_from_tensors(config: DecoderConfig, tensors: dict[str, np.ndarray], dtype) -> DecoderParams:
    c = config
    return DecoderParams(
        config=c,
        token_embedding=_grab(tensors, "decoder.token_embedding", dtype),
        position_embedding=_grab(tensors, "decoder.position_embedding", dtype),
        segment_embedding=_grab(tensors, "decoder.segment_embedding", dtype),
        emb_norm=blocks.NormParams(
            gain=_grab(tensors, "decoder.emb_norm.gain", dtype),
            bias=_grab(tensors, "decoder.emb_norm.bias", dtype),
        ),
        layers=[
            _layer_from_tensors(f"decoder.layer.{i}", tensors, c.heads, c.activation, "post", c.dropout, dtype)
            for i in range(c.layers)
        ],
        head_W=_grab(tensors, "decoder.head.W", dtype),
        head_b=_grab(tensors, "decoder.head.b", dtype),
    )


def ar_params_from_tensors(config: ArConfig, tensors: dict[str, np.ndarray], dtype) -> ARDecoderParams:
    c = config
    layers = []
    for i in range(c.layers):
        prefix = f"ar.layer.{i}"
        layers.append(
            ar_mod.ArLayerParams(
                self_attn=blocks.AttentionParams(
                    W_q=_grab(tensors, f"{prefix}.self_attn.W_q", dtype),
                    W_k=_grab(tensors, f"{prefix}.self_attn.W_k", dtype),
                    W_v=_grab(tensors, f"{prefix}.self_attn.W_v", dtype),
                    W_o=_grab(tensors, f"{prefix}.self_attn.W_o", dtype),
                    heads=c.heads,
                ),
                cross_attn=blocks.AttentionParams(
                    W_q=_grab(tensors, f"{prefix}.cross_attn.W_q", dtype),
                    W_k=_grab(tensors, f"{prefix}.cross_attn.W_k", dtype),
                    W_v=_grab(tensors, f"{prefix}.cross_attn.W_v", dtype),
                    W_o=_grab(tensors, f"{prefix}.cross_attn.W_o", dtype),
                    heads=c.heads,
                ),
                ffn=blocks.FeedForwardParams(
                    W_1=_grab(tensors, f"{prefix}.ffn.W_1", dtype),
                    b_1=_grab(tensors, f"{prefix}.ffn.b_1", dtype),
                    W_2=_grab(tensors, f"{prefix}.ffn.W_2", dtype),
                    b_2=_grab(tensors, f"{prefix}.ffn.b_2", dtype),
                    activation="relu",
                ),
                norm1=blocks.NormParams(
                    gain=_grab(tensors, f"{prefix}.norm1.gain", dtype),
                    bias=_grab(tensors, f"{prefix}.norm1.bias", dtype),
                ),
                norm2=blocks.NormParams(
                    gain=_grab(tensors, f"{prefix}.norm2.gain", dtype),
                    bias=_grab(tensors, f"{prefix}.norm2.bias", dtype),
                ),
                norm3=blocks.NormParams(
                    gain=_grab(tensors, f"{prefix}.norm3.gain", dtype),
                    bias=_grab(tensors, f"{prefix}.norm3.bias", dtype),
                ),
                dropout_rate=c.dropout,
            )
        )
    return ARDecoderParams(
        config=c,
        token_embedding=_grab(tensors, "ar.token_embedding", dtype),
        layers=layers,
        head_W=_grab(tensors, "ar.head.W", dtype),
        head_b=_grab(tensors, "ar.head.b", dtype),
    )


@dataclass
class NarModel:
    """Parallel recognizer: one encoder + decoder pass per utterance."""

    encoder: EncoderParams
    decoder: DecoderParams
    forward_count: int = 0

    @classmethod
    def init(cls, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
             rng: np.random.Generator, dtype=np.float32) -> "NarModel":
        return cls(
            encoder=enc.init_encoder(encoder_cfg, rng, dtype),
            decoder=dec.init_decoder(decoder_cfg, rng, dtype),
        )

    def forward(self, features, lengths: Optional[np.ndarray] = None) -> Tensor:
        """Single inference pass covering every output position."""
        self.forward_count += 1
        with no_grad():
            h_f = enc.encoder_forward(features, self.encoder, lengths=lengths)
            return dec.decoder_forward(h_f, self.decoder)

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.encoder.named_tensors(), **self.decoder.named_tensors()}

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}

    def metadata(self) -> dict[str, str]:
        return {
            **config_to_metadata("config.encoder", self.encoder.config),
            **config_to_metadata("config.decoder", self.decoder.config),
        }

    def save(self, path, extra_metadata: Optional[dict[str, str]] = None) -> None:
        save_checkpoint(path, self.named_tensors(), {**self.metadata(), **(extra_metadata or {})})

    @classmethod
    def from_checkpoint(cls, source, dtype=np.float32) -> "NarModel":
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        encoder_cfg = config_from_metadata("config.encoder", EncoderConfig, ckpt.metadata)
        decoder_cfg = config_from_metadata("config.decoder", DecoderConfig, ckpt.metadata)
        model = cls(
            encoder=encoder_params_from_tensors(encoder_cfg, ckpt.tensors, dtype),
            decoder=decoder_params_from_tensors(decoder_cfg, ckpt.tensors, dtype),
        )
        expected = set(model.named_tensors())
        present = set(ckpt.tensors)
        if expected != present:
            mismatch = sorted(expected ^ present)[0]
            raise CheckpointError(f"checkpoint tensor set mismatch, first differing name: {mismatch}")
        return model


@dataclass
class ArModel:
    """Sequential baseline: shares the frame encoder, decodes token by token."""

    encoder: EncoderParams
    ar: ARDecoderParams
    forward_count: int = 0

    @classmethod
    def init(cls, encoder_cfg: EncoderConfig, ar_cfg: ArConfig,
             rng: np.random.Generator, dtype=np.float32) -> "ArModel":
        return cls(
            encoder=enc.init_encoder(encoder_cfg, rng, dtype),
            ar=ar_mod.init_ar_decoder(ar_cfg, rng, dtype),
        )

    def decode_ids(self, features, max_len: int) -> np.ndarray:
        with no_grad():
            h_a = enc.encode_acoustic(features, self.encoder)
        steps: list = []
        ids = ar_mod.ar_greedy_decode(h_a, self.ar, max_len, step_counter=steps)
        self.forward_count += len(steps)
        return ids

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.encoder.named_tensors(), **self.ar.named_tensors()}

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}

    def metadata(self) -> dict[str, str]:
        return {
            **config_to_metadata("config.encoder", self.encoder.config),
            **config_to_metadata("config.ar", self.ar.config),
        }

    def save(self, path, extra_metadata: Optional[dict[str, str]] = None) -> None:
        save_checkpoint(path, self.named_tensors(), {**self.metadata(), **(extra_metadata or {})})

    @classmethod
    def from_checkpoint(cls, source, dtype=np.float32) -> "ArModel":
        ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        encoder_cfg = config_from_metadata("config.encoder", EncoderConfig, ckpt.metadata)
        ar_cfg = config_from_metadata("config.ar", ArConfig, ckpt.metadata)
        model = cls(
            encoder=encoder_params_from_tensors(encoder_cfg, ckpt.tensors, dtype),
            ar=ar_params_from_tensors(ar_cfg, ckpt.tensors, dtype),
        )
        expected = set(model.named_tensors())
        present = set(ckpt.tensors)
        if expected != present:
            mismatch = sorted(expected ^ present)[0]
            raise CheckpointError(f"checkpoint tensor set mismatch, first differing name: {mismatch}")
        return model
