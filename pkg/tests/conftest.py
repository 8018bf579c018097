"""Shared fixtures: a tiny synthetic corpus and matching micro model configs."""

import numpy as np
import pytest

from narasr import corpus, tokenizer
from narasr.ar import ArConfig
from narasr.decoder import DecoderConfig
from narasr.encoder import EncoderConfig


TINY_L = 8


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-corpus")
    spec = corpus.SyntheticTaskSpec(
        vocab_size=4, tokens_min=2, tokens_max=4,
        train_count=24, dev_count=8, test_count=8,
    )
    manifests = corpus.generate_synthetic_corpus(spec, seed=7, out_dir=root)
    return {"spec": spec, "root": root, "manifests": manifests}


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    records = corpus.read_manifest(tiny_corpus["manifests"]["train"])
    return tokenizer.build_vocab(r.text for r in records)


def tiny_encoder_config(**overrides):
    base = dict(
        d_m=16, d_n=16, feat_dim=80, cnn_filters=4, kernel=3,
        self_attn_layers_pre=1, refine_layers=0, self_attn_layers_post=1,
        heads=2, d_ff=32, query_count=TINY_L, dropout=0.0,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def tiny_decoder_config(vocab_size, **overrides):
    base = dict(vocab_size=vocab_size, d_n=16, layers=2, heads=2, d_ff=32,
                max_positions=TINY_L, dropout=0.0)
    base.update(overrides)
    return DecoderConfig(**base)


def tiny_ar_config(vocab_size, **overrides):
    base = dict(vocab_size=vocab_size, d_m=16, layers=2, heads=2, d_ff=32,
                max_len=TINY_L, dropout=0.0)
    base.update(overrides)
    return ArConfig(**base)
