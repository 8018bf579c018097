"""Tokenizer: vocabulary construction, fixed-length encode/decode."""

import numpy as np
import pytest

from narasr import tokenizer as tok
from narasr.errors import ConfigError, LengthError


class TestBuildVocab:
    def test_first_appearance_order(self):
        vocab = tok.build_vocab(["ab", "ba"])
        assert len(vocab) == 7
        assert vocab.id_of["a"] == 5
        assert vocab.id_of["b"] == 6

    def test_idempotent_over_duplicates(self):
        once = tok.build_vocab(["a"])
        twice = tok.build_vocab(["a", "a"])
        assert once.token_of == twice.token_of

    def test_specials_fixed(self):
        vocab = tok.build_vocab(["xyz"])
        assert vocab.token_of[:5] == tok.SPECIAL_TOKENS
        assert vocab.id_of["[PAD]"] == 0 and vocab.id_of["[MASK]"] == 4

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigError):
            tok.build_vocab([])


class TestEncode:
    def test_basic(self):
        vocab = tok.build_vocab(["ab"])
        seq = tok.encode("ab", vocab, 6)
        np.testing.assert_array_equal(seq.ids, [2, 5, 6, 3, 0, 0])
        assert seq.true_length == 4

    def test_empty_transcript(self):
        vocab = tok.build_vocab(["ab"])
        seq = tok.encode("", vocab, 4)
        np.testing.assert_array_equal(seq.ids, [2, 3, 0, 0])

    def test_boundary_rejected(self):
        vocab = tok.build_vocab(["a"])
        with pytest.raises(LengthError, match="59.*60"):
            tok.encode("a" * 59, vocab, 60)

    def test_unknown_char_maps_to_unk(self):
        vocab = tok.build_vocab(["a"])
        seq = tok.encode("aq", vocab, 6)
        np.testing.assert_array_equal(seq.ids[:4], [2, 5, 1, 3])

    def test_length_always_exact(self):
        vocab = tok.build_vocab(["abc"])
        for text in ("", "a", "abccba"):
            assert len(tok.encode(text, vocab, 12).ids) == 12


class TestDecode:
    def test_inverse_of_encode(self):
        vocab = tok.build_vocab(["ab"])
        assert tok.decode([2, 5, 6, 3, 0], vocab) == "ab"

    def test_empty(self):
        vocab = tok.build_vocab(["ab"])
        assert tok.decode([2, 3], vocab) == ""

    def test_stops_at_sep(self):
        vocab = tok.build_vocab(["ab"])
        assert tok.decode([2, 5, 3, 6], vocab) == "a"

    def test_unknown_id(self):
        vocab = tok.build_vocab(["ab"])
        with pytest.raises(IndexError):
            tok.decode([2, 99, 3], vocab)

    def test_round_trip_random(self):
        vocab = tok.build_vocab(["abcdef"])
        rng = np.random.default_rng(4)
        letters = "abcdef"
        for _ in range(200):
            n = int(rng.integers(0, 15))
            text = "".join(letters[i] for i in rng.integers(0, 6, size=n))
            seq = tok.encode(text, vocab, 17)
            assert tok.decode(seq.ids, vocab) == text


class TestVocabularySerialization:
    def test_round_trip(self, tmp_path):
        vocab = tok.build_vocab(["hello", "world"])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = tok.Vocabulary.load(path)
        assert loaded.token_of == vocab.token_of
        vocab.save(tmp_path / "again.txt")
        assert (tmp_path / "vocab.txt").read_bytes() == (tmp_path / "again.txt").read_bytes()


class TestTokenSequence:
    def test_invariants_enforced(self):
        with pytest.raises(ConfigError):
            tok.TokenSequence(ids=np.array([2, 5, 0, 0]), true_length=3)  # no SEP
        with pytest.raises(ConfigError):
            tok.TokenSequence(ids=np.array([5, 3, 0, 0]), true_length=2)  # no CLS
        with pytest.raises(ConfigError):
            tok.TokenSequence(ids=np.array([2, 3, 5, 0]), true_length=2)  # junk after SEP
