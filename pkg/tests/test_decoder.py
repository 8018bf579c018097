"""Masked-LM decoder: forward contracts, corruption statistics, training."""

import math

import numpy as np
import pytest

from narasr import decoder as dec
from narasr import tensor as T
from narasr import tokenizer as tok
from narasr.errors import LengthError
from narasr.optim import AdamState
from narasr.tensor import Tensor


def micro_config(vocab=9, **overrides):
    base = dict(vocab_size=vocab, d_n=8, layers=2, heads=2, d_ff=8, max_positions=12, dropout=0.0)
    base.update(overrides)
    return dec.DecoderConfig(**base)


@pytest.fixture
def params():
    return dec.init_decoder(micro_config(), np.random.default_rng(0))


class TestDecoderForward:
    def test_logits_shape(self, params):
        rng = np.random.default_rng(1)
        logits = dec.decoder_forward(Tensor(rng.standard_normal((5, 8))), params)
        assert logits.shape == (5, 9)

    def test_zero_head_gives_bias(self, params):
        import copy

        rng = np.random.default_rng(2)
        clone = copy.copy(params)
        clone.head_W = T.zeros((8, 9), requires_grad=True)
        clone.head_b = Tensor(np.arange(9, dtype=float), requires_grad=True)
        logits = dec.decoder_forward(Tensor(rng.standard_normal((4, 8))), clone)
        np.testing.assert_array_equal(logits.data, np.tile(np.arange(9.0), (4, 1)))

    def test_bidirectional_mixing(self, params):
        rng = np.random.default_rng(3)
        h = rng.standard_normal((6, 8))
        base = dec.decoder_forward(Tensor(h), params)
        poked = h.copy()
        poked[1, 3] += 1.0
        after = dec.decoder_forward(Tensor(poked), params)
        for j in (0, 3, 5):
            assert not np.allclose(after.data[j], base.data[j]), f"position {j} unaffected"

    def test_length_limit(self, params):
        rng = np.random.default_rng(4)
        with pytest.raises(LengthError):
            dec.decoder_forward(Tensor(rng.standard_normal((13, 8))), params)

    def test_permutation_sensitive(self, params):
        rng = np.random.default_rng(5)
        h = rng.standard_normal((6, 8))
        perm = np.array([3, 1, 4, 0, 5, 2])
        base = dec.decoder_forward(Tensor(h), params)
        permuted = dec.decoder_forward(Tensor(h[perm]), params)
        assert not np.allclose(permuted.data, base.data[perm], atol=1e-6)

    def test_gradient_check_micro(self):
        params = dec.init_decoder(micro_config(vocab=7, d_n=8, layers=1), np.random.default_rng(6))
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((3, 8)))
        report = T.finite_difference_check(
            lambda t: T.label_smoothed_nll(dec.decoder_forward(t, params), [1, 5, 6], 0.1),
            x,
            h=1e-5,
        )
        assert report.max_rel_error < 1e-3, report


class TestMlmCorrupt:
    def make_seq(self, vocab, rng, length=16):
        n = int(rng.integers(1, length - 2))
        content = rng.integers(5, vocab, size=n)
        ids = np.zeros(length, dtype=np.int64)
        ids[0] = tok.CLS_ID
        ids[1 : 1 + n] = content
        ids[1 + n] = tok.SEP_ID
        return tok.TokenSequence(ids=ids, true_length=n + 2)

    def test_zero_selection_under_unlucky_seed(self):
        vocab = 9
        rng = np.random.default_rng(2)
        seq = self.make_seq(vocab, np.random.default_rng(0))
        # scan for a draw that selects nothing; tiny rate makes this common
        for _ in range(50):
            ids, positions = dec.mlm_corrupt(seq, 0.01, rng, vocab)
            if len(positions) == 0:
                np.testing.assert_array_equal(ids, seq.ids)
                return
        pytest.fail("no zero-selection draw found at rate 0.01")

    def test_specials_never_selected(self):
        vocab = 9
        rng = np.random.default_rng(3)
        for _ in range(500):
            seq = self.make_seq(vocab, rng)
            ids, positions = dec.mlm_corrupt(seq, 0.5, rng, vocab)
            specials = set(np.where(seq.ids < 5)[0].tolist())
            assert specials.isdisjoint(set(positions.tolist()))

    def test_split_fractions(self):
        vocab = 40
        rng = np.random.default_rng(4)
        content = rng.integers(5, vocab, size=58)
        ids = np.zeros(60, dtype=np.int64)
        ids[0] = tok.CLS_ID
        ids[1:59] = content
        ids[59] = tok.SEP_ID
        seq = tok.TokenSequence(ids=ids, true_length=60)
        n_mask = n_random = n_keep = total = 0
        while total < 100_000:
            corrupted, positions = dec.mlm_corrupt(seq, 0.9, rng, vocab)
            for p in positions:
                total += 1
                if corrupted[p] == tok.MASK_ID:
                    n_mask += 1
                elif corrupted[p] == seq.ids[p]:
                    n_keep += 1
                else:
                    n_random += 1
        assert abs(n_mask / total - 0.8) < 0.02
        # random draws can coincide with the original id, shifting a sliver
        # of the 10% random share into "unchanged"
        assert abs(n_random / total - 0.1) < 0.02
        assert abs(n_keep / total - 0.1) < 0.02


class TestClassifyPositions:
    def test_unique_maxima(self):
        logits = np.array([[0.1, 0.9, 0.0], [2.0, -1.0, 0.5]])
        np.testing.assert_array_equal(dec.classify_positions(logits), [1, 0])

    def test_tie_breaks_to_lowest_id(self):
        logits = np.zeros((3, 5))
        np.testing.assert_array_equal(dec.classify_positions(logits), [0, 0, 0])

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((20, 7))
        base = dec.classify_positions(logits)
        np.testing.assert_array_equal(dec.classify_positions(logits + 3.0), base)
        np.testing.assert_array_equal(dec.classify_positions(logits * 2.0), base)
        softmaxed = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        np.testing.assert_array_equal(dec.classify_positions(softmaxed), base)


class TestMlmPretraining:
    def make_corpus(self, vocab, n, rng, length=12):
        seqs = []
        for _ in range(n):
            k = int(rng.integers(2, length - 2))
            ids = np.zeros(length, dtype=np.int64)
            ids[0] = tok.CLS_ID
            ids[1 : 1 + k] = rng.integers(5, vocab, size=k)
            ids[1 + k] = tok.SEP_ID
            seqs.append(tok.TokenSequence(ids=ids, true_length=k + 2))
        return seqs

    def test_initial_loss_near_log_v(self):
        vocab = 9
        params = dec.init_decoder(micro_config(vocab), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        corpus = self.make_corpus(vocab, 16, rng)
        state = AdamState(params.trainable_tensors())
        loss = dec.mlm_pretrain_step(corpus, params, state, 0.3, 0.0, rng)
        assert abs(loss - math.log(vocab)) < 0.1 * math.log(vocab)

    def test_loss_decreases_over_200_steps(self):
        # 50 sentences built from repeating motifs, so masked ids are
        # predictable from context and the floor is near zero
        vocab = 9
        params = dec.init_decoder(micro_config(vocab), np.random.default_rng(0))
        rng = np.random.default_rng(2)
        corpus = []
        for i in range(50):
            motif = [5 + (i % 4), 5 + ((i + 1) % 4)]
            k = 4 + (i % 5)
            ids = np.zeros(12, dtype=np.int64)
            ids[0] = tok.CLS_ID
            for j in range(k):
                ids[1 + j] = motif[j % 2]
            ids[1 + k] = tok.SEP_ID
            corpus.append(tok.TokenSequence(ids=ids, true_length=k + 2))
        state = AdamState(params.trainable_tensors())
        losses = []
        for step in range(200):
            loss = dec.mlm_pretrain_step(corpus[:32], params, state, 0.3, 3e-3, rng)
            if loss is not None:
                losses.append(loss)
        assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])

    def test_deterministic_given_seed(self):
        vocab = 9

        def run():
            params = dec.init_decoder(micro_config(vocab), np.random.default_rng(0))
            rng = np.random.default_rng(3)
            corpus = self.make_corpus(vocab, 20, rng)
            state = AdamState(params.trainable_tensors())
            return [dec.mlm_pretrain_step(corpus, params, state, 0.3, 1e-3, rng) for _ in range(10)]

        assert run() == run()

    def test_gradient_zero_outside_masked_positions(self):
        vocab = 9
        params = dec.init_decoder(micro_config(vocab), np.random.default_rng(0))
        rng = np.random.default_rng(4)
        ids = np.array([tok.CLS_ID, 6, 7, 8, tok.SEP_ID, tok.PAD_ID])
        logits = dec.mlm_forward(ids, params)
        weights = np.array([0.0, 1.0, 0.0, 1.0, 0.0, 0.0])
        loss = T.label_smoothed_nll(logits, ids, 0.0, weights=weights)
        loss.backward()
        grads = logits.grad
        np.testing.assert_array_equal(grads[0], np.zeros(vocab))
        np.testing.assert_array_equal(grads[2], np.zeros(vocab))
        assert np.abs(grads[1]).sum() > 0
