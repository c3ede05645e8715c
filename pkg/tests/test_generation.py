"""Decoder: step distributions, teacher forcing, beam search."""

import numpy as np
import pytest

from deepcom.corpus import BOS, EOS, PAD, UNK
from deepcom.generation import (
    beam_search,
    decode_step,
    greedy_decode,
    init_decoder,
    sequence_log_prob,
)
from deepcom.numerics import Tensor, finite_difference_check
from deepcom.reading import extract_span_set, make_end_fn, read_article, span_vectors
from deepcom.training import derive_rng
from deepcom.verification import (
    exhaustive_best_sequence,
    make_markov_decoder,
    make_toy_instance,
    realized_transition_table,
)


def _decode_inputs(seed=0, **kw):
    enc, store, dims, vocab = make_toy_instance(seed=seed, **kw)
    out = read_article(enc, store, dims)
    end_fn = make_end_fn(out, store)
    span_set = extract_span_set(out, end_fn)
    h_spans = span_vectors(out, span_set)
    return enc, store, dims, out, h_spans


class TestInitDecoder:
    def test_single_vector_attention_returns_it(self):
        _, store, dims, out, _ = _decode_inputs(seed=1, title_len=1, pad_slots=0)
        row = Tensor(np.random.default_rng(0).normal(size=(1, dims.d1)))
        # one title row and one identical span row: any convex combination is the row
        state = init_decoder(row, np.ones(1, dtype=bool), row, store)
        np.testing.assert_allclose(state.h.data, row.data, atol=1e-12)

    def test_identical_rows_return_common_row(self):
        _, store, dims, out, _ = _decode_inputs(seed=2)
        common = np.random.default_rng(1).normal(size=(1, dims.d1))
        h_title = Tensor(np.repeat(common, 3, axis=0))
        h_spans = Tensor(np.repeat(common, 2, axis=0))
        state = init_decoder(h_title, np.ones(3, dtype=bool), h_spans, store)
        np.testing.assert_allclose(state.h.data, common, atol=1e-12)

    def test_state_width(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=3)
        state = init_decoder(out.h_title, enc.title_mask, h_spans, store)
        assert state.h.data.shape == (1, dims.d1)

    def test_empty_spans_rejected(self):
        enc, store, dims, out, _ = _decode_inputs(seed=4)
        with pytest.raises(ValueError):
            init_decoder(out.h_title, enc.title_mask, Tensor(np.zeros((0, dims.d1))), store)


class TestDecodeStep:
    def test_distribution_sums_to_one_with_reserved_masked(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=5)
        state = init_decoder(out.h_title, enc.title_mask, h_spans, store)
        state, probs = decode_step(state, BOS, store)
        np.testing.assert_allclose(probs.data.sum(), 1.0, atol=1e-12)
        assert probs.data[0, PAD] == 0.0
        assert probs.data[0, BOS] == 0.0
        assert (probs.data >= 0).all()

    def test_gradient_of_step_log_prob(self):
        enc, store, dims, out, _ = _decode_inputs(seed=6, body_len=3, pad_slots=0)
        gen_params = {n: t for n, t in store.items() if n.startswith("gen.")}

        def loss():
            out2 = read_article(enc, store, dims)
            end_fn = make_end_fn(out2, store)
            h_spans = span_vectors(out2, extract_span_set(out2, end_fn))
            return sequence_log_prob(
                enc.comment_ids, enc.comment_mask, out2.h_title, enc.title_mask, h_spans, store
            )

        report = finite_difference_check(
            loss, gen_params, coords_per_param=4, rng=np.random.default_rng(2)
        )
        assert report.max_rel_error < 1e-5


class TestSequenceLogProb:
    def test_minimal_comment_is_single_term(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=7)
        ids = np.asarray([BOS, EOS])
        mask = np.ones(2, dtype=bool)
        lp = sequence_log_prob(ids, mask, out.h_title, enc.title_mask, h_spans, store)
        state = init_decoder(out.h_title, enc.title_mask, h_spans, store)
        _, probs = decode_step(state, BOS, store)
        np.testing.assert_allclose(lp.item(), np.log(probs.data[0, EOS]), atol=1e-12)

    def test_strictly_negative_for_spread_distributions(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=8)
        lp = sequence_log_prob(
            enc.comment_ids, enc.comment_mask, out.h_title, enc.title_mask, h_spans, store
        )
        assert lp.item() < 0

    def test_matches_greedy_path_score(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=9)
        hyp = greedy_decode(out.h_title, enc.title_mask, h_spans, store, max_len=5)
        ids = np.asarray([BOS] + hyp.tokens)
        mask = np.ones(len(ids), dtype=bool)
        lp = sequence_log_prob(ids, mask, out.h_title, enc.title_mask, h_spans, store)
        np.testing.assert_allclose(lp.item(), hyp.log_prob, atol=1e-10)

    def test_empty_comment_rejected(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=10)
        with pytest.raises(ValueError):
            sequence_log_prob(
                np.asarray([BOS]), np.ones(1, dtype=bool),
                out.h_title, enc.title_mask, h_spans, store,
            )

    def test_vocabulary_relabeling_invariance(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=11)
        base = sequence_log_prob(
            enc.comment_ids, enc.comment_mask, out.h_title, enc.title_mask, h_spans, store
        ).item()
        rng = np.random.default_rng(3)
        word_ids = np.arange(4, dims.vocab)
        perm = np.concatenate([np.arange(4), rng.permutation(word_ids)])
        # relabel: token t becomes perm[t]; embedding row perm[t] must hold old row t
        embed = np.empty_like(store["gen.embed"].data)
        embed[perm] = store["gen.embed"].data
        out_w = np.empty_like(store["gen.out.w"].data)
        out_w[:, perm] = store["gen.out.w"].data
        out_b = np.empty_like(store["gen.out.b"].data)
        out_b[perm] = store["gen.out.b"].data
        store["gen.embed"].data = embed
        store["gen.out.w"].data = out_w
        store["gen.out.b"].data = out_b
        relabeled_ids = perm[enc.comment_ids]
        relabeled = sequence_log_prob(
            relabeled_ids, enc.comment_mask, out.h_title, enc.title_mask, h_spans, store
        ).item()
        np.testing.assert_allclose(relabeled, base, atol=1e-10)


class TestBeamSearch:
    def test_beam_one_equals_greedy(self):
        for seed in range(5):
            enc, store, dims, out, h_spans = _decode_inputs(seed=seed)
            greedy = greedy_decode(out.h_title, enc.title_mask, h_spans, store, max_len=6)
            beam1 = beam_search(out.h_title, enc.title_mask, h_spans, store, beam=1, max_len=6)
            assert greedy.tokens == beam1.tokens
            assert greedy.log_prob == beam1.log_prob

    def test_wider_beam_never_scores_worse(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=12)
        scores = [
            beam_search(out.h_title, enc.title_mask, h_spans, store, beam=b, max_len=6).log_prob
            for b in (1, 2, 5, 8)
        ]
        for narrow, wide in zip(scores, scores[1:]):
            assert wide >= narrow - 1e-12

    def test_deterministic_across_runs(self):
        enc, store, dims, out, h_spans = _decode_inputs(seed=13)
        a = beam_search(out.h_title, enc.title_mask, h_spans, store, beam=5, max_len=6)
        b = beam_search(out.h_title, enc.title_mask, h_spans, store, beam=5, max_len=6)
        assert a.tokens == b.tokens and a.log_prob == b.log_prob

    def test_matches_exhaustive_on_markov_model(self):
        rng = derive_rng(0, 50)
        table = rng.normal(0.0, 2.5, (7, 7))
        table[:, PAD] = -30.0
        table[:, BOS] = -30.0
        table[:, UNK] -= 3.0
        table[:, EOS] -= 2.5
        h_title, title_mask, h_spans, store = make_markov_decoder(table)
        best_tokens, best_score = exhaustive_best_sequence(h_title, title_mask, h_spans, store, 4)
        hyp = beam_search(h_title, title_mask, h_spans, store, beam=5, max_len=4)
        assert hyp.tokens == best_tokens
        np.testing.assert_allclose(hyp.log_prob, best_score, atol=1e-12)

    def test_markov_decoder_realizes_designed_table(self):
        logits = np.full((7, 7), -30.0)
        emit = [3, 4, 5, 6]
        for prev in range(7):
            for k, nxt in enumerate(emit):
                logits[prev, nxt] = [2.0, 0.5, -1.0, -2.0][(prev + k) % 4]
        h_title, title_mask, h_spans, store = make_markov_decoder(logits)
        table = realized_transition_table(h_title, title_mask, h_spans, store)
        # the construction promises softmax(logit row) per previous token
        for prev in range(7):
            want = np.exp(logits[prev, emit]) / np.exp(logits[prev, emit]).sum()
            np.testing.assert_allclose(table[prev, emit], want, atol=1e-6)

    def test_unfinished_hypotheses_returned_when_eos_unreachable(self):
        logits = np.full((7, 7), -30.0)
        logits[:, 4] = 5.0  # only one attractive continuation, never EOS
        h_title, title_mask, h_spans, store = make_markov_decoder(logits)
        hyp = beam_search(h_title, title_mask, h_spans, store, beam=2, max_len=3)
        assert len(hyp.tokens) == 3
        assert not hyp.finished
