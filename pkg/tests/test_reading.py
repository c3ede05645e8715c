"""Reading network: representations, fusion, start/end heads, span algebra."""

import math
import warnings

import numpy as np
import pytest

from deepcom.corpus import Triple, build_vocab, encode_triple
from deepcom.numerics import Tensor, finite_difference_check, sum_all
from deepcom.params import ModelDims, ParamStore
from deepcom.reading import (
    SpanSet,
    end_distribution,
    extract_span_set,
    fallback_span,
    fuse,
    make_end_fn,
    read_article,
    register_params,
    represent_body,
    represent_title,
    sample_span_set,
    span_set_log_prob,
    span_vectors,
    start_distribution,
)
from deepcom.training import build_model, derive_rng
from deepcom.verification import make_toy_instance


def _instance(seed=0, body_len=6, **kw):
    return make_toy_instance(seed=seed, body_len=body_len, **kw)


class TestRepresentBody:
    def test_single_real_token_attends_to_itself(self):
        enc, store, dims, _ = _instance(body_len=1, pad_slots=2)
        e_hat, h_body = represent_body(enc, store, dims)
        assert (h_body.data[1:] == 0).all()
        assert (e_hat.data[1:] == 0).all()

    def test_attention_rows_normalized(self):
        enc, store, dims, _ = _instance(seed=3, body_len=5)
        # reproduce the attention weights from the published pieces
        e_hat, _ = represent_body(enc, store, dims)
        from deepcom.numerics import matmul, softmax_rows, transpose, scale

        m = e_hat.data.shape[0]
        scores = scale(matmul(e_hat, transpose(e_hat)), 1.0 / math.sqrt(dims.d1))
        alpha = softmax_rows(scores, np.broadcast_to(enc.body_mask, (m, m)))
        np.testing.assert_allclose(alpha.data.sum(axis=1), np.ones(m), atol=1e-12)
        assert (alpha.data[:, ~enc.body_mask] == 0).all()

    def test_identical_embeddings_give_uniform_attention(self):
        enc, store, dims, _ = _instance(seed=4, body_len=4, pad_slots=0)
        enc.body_ids[:] = enc.body_ids[0]
        enc.body_pos_word[:] = 0
        enc.body_pos_sent[:] = 0
        e_hat, _ = represent_body(enc, store, dims)
        from deepcom.numerics import matmul, softmax_rows, transpose, scale

        scores = scale(matmul(e_hat, transpose(e_hat)), 1.0 / math.sqrt(dims.d1))
        alpha = softmax_rows(scores, np.broadcast_to(enc.body_mask, (4, 4)))
        np.testing.assert_allclose(alpha.data, np.full((4, 4), 0.25), atol=1e-12)

    def test_all_padding_rejected(self):
        enc, store, dims, _ = _instance(body_len=2)
        enc.body_mask[:] = False
        with pytest.raises(ValueError, match="all-padded"):
            represent_body(enc, store, dims)


class TestRepresentTitle:
    def test_zero_params_give_zero_states(self):
        enc, store, dims, _ = _instance()
        for name, t in store.items():
            if name.startswith("reading.title_gru") or name == "reading.embed":
                t.data = np.zeros_like(t.data)
        h = represent_title(enc, store, dims)
        np.testing.assert_array_equal(h.data, np.zeros_like(h.data))

    def test_shape_and_padded_rows(self):
        enc, store, dims, _ = _instance(title_len=2)
        h = represent_title(enc, store, dims)
        assert h.data.shape == (dims.len_title, dims.d1)
        assert (h.data[enc.title_mask] != 0).any()

    def test_prefix_property(self):
        enc, store, dims, _ = _instance(seed=9, title_len=4)
        h_before = represent_title(enc, store, dims).data.copy()
        changed = enc.title_ids.copy()
        changed[3] = (changed[3] + 1) % dims.vocab
        enc.title_ids = changed
        h_after = represent_title(enc, store, dims).data
        np.testing.assert_array_equal(h_before[:3], h_after[:3])
        assert (h_before[3] != h_after[3]).any()

    def test_empty_title_rejected(self):
        enc, store, dims, _ = _instance()
        enc.title_mask[:] = False
        with pytest.raises(ValueError, match="empty title"):
            represent_title(enc, store, dims)


class TestFuse:
    def test_closed_gate_passes_body_through(self):
        enc, store, dims, _ = _instance(seed=5)
        store["reading.gate.b"].data = np.full(dims.d1, -60.0)
        h_title = represent_title(enc, store, dims)
        _, h_body = represent_body(enc, store, dims)
        fused = fuse(h_title, h_body, enc.title_mask, enc.body_mask, store, dims)
        np.testing.assert_allclose(fused.data, h_body.data, atol=1e-20)

    def test_gate_strictly_inside_unit_interval(self):
        enc, store, dims, _ = _instance(seed=6)
        h_title = represent_title(enc, store, dims)
        _, h_body = represent_body(enc, store, dims)
        from deepcom.numerics import add, concat, matmul, sigmoid, softmax_rows, transpose, scale

        m = h_body.data.shape[0]
        scores = scale(matmul(h_body, transpose(h_title)), 1.0 / math.sqrt(dims.d1))
        alpha = softmax_rows(scores, np.broadcast_to(enc.title_mask, (m, len(enc.title_mask))))
        c_title = matmul(alpha, h_title)
        gate = sigmoid(
            add(matmul(concat([h_body, c_title], axis=1), store["reading.gate.w"]),
                store["reading.gate.b"])
        )
        assert (gate.data > 0).all() and (gate.data < 1).all()

    def test_gradient_of_gate_weight(self):
        enc, store, dims, _ = _instance(seed=7, body_len=4)

        def loss():
            h_title = represent_title(enc, store, dims)
            _, h_body = represent_body(enc, store, dims)
            return sum_all(fuse(h_title, h_body, enc.title_mask, enc.body_mask, store, dims))

        params = {"reading.gate.w": store["reading.gate.w"]}
        assert finite_difference_check(loss, params).max_rel_error < 1e-5


class TestStartDistribution:
    def test_zero_params_give_half(self):
        enc, store, dims, _ = _instance()
        for name, t in store.items():
            if name.startswith("reading.start"):
                t.data = np.zeros_like(t.data)
        fused = Tensor(np.random.default_rng(0).normal(size=(dims.len_body, dims.d1)))
        probs = start_distribution(fused, enc.body_mask, store)
        np.testing.assert_allclose(probs.data[enc.body_mask, 1], 0.5)

    def test_rows_sum_to_one_and_padding_forced(self):
        enc, store, dims, _ = _instance(seed=8, body_len=3, pad_slots=2)
        out = read_article(enc, store, dims)
        np.testing.assert_allclose(out.start_probs.data.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(out.start_probs.data[~enc.body_mask, 1], 0.0)

    def test_position_wise_permutation_equivariance(self):
        enc, store, dims, _ = _instance(seed=10)
        rng = np.random.default_rng(2)
        fused = Tensor(rng.normal(size=(4, dims.d1)))
        mask = np.ones(4, dtype=bool)
        perm = rng.permutation(4)
        direct = start_distribution(Tensor(fused.data[perm]), mask, store).data
        permuted = start_distribution(fused, mask, store).data[perm]
        np.testing.assert_allclose(direct, permuted, atol=1e-14)


class TestEndDistribution:
    def test_last_position_forces_point_mass(self):
        enc, store, dims, _ = _instance(seed=11, body_len=4)
        out = read_article(enc, store, dims)
        last = int(np.flatnonzero(enc.body_mask)[-1])
        dist = end_distribution(out, store, last)
        np.testing.assert_allclose(dist.data[0, last], 1.0)

    def test_normalized_and_legal(self):
        enc, store, dims, _ = _instance(seed=12, body_len=5)
        out = read_article(enc, store, dims)
        for a in range(5):
            row = end_distribution(out, store, a).data[0]
            np.testing.assert_allclose(row.sum(), 1.0, atol=1e-12)
            assert (row[:a] == 0).all()

    def test_identical_rows_give_uniform_legal_ends(self):
        enc, store, dims, _ = _instance(seed=13, body_len=4, pad_slots=0)
        out = read_article(enc, store, dims)
        out.fused.data[:] = out.fused.data[0]
        dist = end_distribution(out, store, 1)
        np.testing.assert_allclose(dist.data[0, 1:], np.full(3, 1 / 3), atol=1e-12)

    def test_out_of_range_start(self):
        enc, store, dims, _ = _instance(body_len=3, pad_slots=1)
        out = read_article(enc, store, dims)
        with pytest.raises(IndexError):
            end_distribution(out, store, 3)  # the padded slot


class TestSampling:
    def test_certain_start_always_drawn(self):
        enc, store, dims, _ = _instance(seed=14, body_len=3, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [1.0, 0.0, 0.0]
        out.start_probs.data[:, 0] = [0.0, 1.0, 1.0]
        end_fn = make_end_fn(out, store)
        for k in range(20):
            s = sample_span_set(out, end_fn, derive_rng(0, k))
            assert s.starts() == [0] and not s.fallback

    def test_no_start_falls_back_to_argmax_singleton(self):
        enc, store, dims, _ = _instance(seed=15, body_len=3, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [0.0, 0.0, 0.0]
        out.start_probs.data[:, 0] = 1.0
        end_fn = make_end_fn(out, store)
        s = sample_span_set(out, end_fn, derive_rng(1, 1))
        assert s.fallback and len(s.spans) == 1 and s.spans[0][0] == 0
        assert s.spans[0] == fallback_span(out, end_fn)

    def test_empirical_start_frequency(self):
        enc, store, dims, _ = _instance(seed=16, body_len=4)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = 0.3
        out.start_probs.data[:, 0] = 0.7
        end_fn = make_end_fn(out, store)
        rng = derive_rng(2)
        draws = 10000
        hits = np.zeros(4)
        for _ in range(draws):
            s = sample_span_set(out, end_fn, rng)
            if not s.fallback:
                for a in s.starts():
                    hits[a] += 1
        np.testing.assert_allclose(hits / draws, 0.3, atol=0.02)

    def test_sampled_spans_avoid_padding_and_are_legal(self):
        for seed in range(10):
            enc, store, dims, _ = _instance(seed=seed, body_len=3, pad_slots=2)
            out = read_article(enc, store, dims)
            end_fn = make_end_fn(out, store)
            s = sample_span_set(out, end_fn, derive_rng(3, seed))
            for a, e in s.spans:
                assert enc.body_mask[a] and enc.body_mask[e]
                assert a <= e


class TestExtraction:
    def test_threshold_rule(self):
        enc, store, dims, _ = _instance(seed=17, body_len=3, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [0.6, 0.4, 0.7]
        out.start_probs.data[:, 0] = 1.0 - out.start_probs.data[:, 1]
        s = extract_span_set(out, make_end_fn(out, store))
        assert s.starts() == [0, 2]

    def test_exact_half_is_not_a_start(self):
        enc, store, dims, _ = _instance(seed=18, body_len=2, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [0.5, 0.5]
        out.start_probs.data[:, 0] = [0.5, 0.5]
        s = extract_span_set(out, make_end_fn(out, store))
        assert s.fallback  # nothing exceeds one half, so the fallback singleton

    def test_end_tie_takes_smallest_index(self):
        enc, store, dims, _ = _instance(seed=19, body_len=4, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [0.9, 0.0, 0.0, 0.0]
        out.start_probs.data[:, 0] = 1.0 - out.start_probs.data[:, 1]
        out.fused.data[:] = out.fused.data[0]  # uniform end scores tie everywhere
        s = extract_span_set(out, make_end_fn(out, store))
        assert s.spans == [(0, 0)]


class TestSpanSetLogProb:
    def test_all_half_empty_set(self):
        enc, store, dims, _ = _instance(seed=20, body_len=3, pad_slots=1)
        out = read_article(enc, store, dims)
        out.start_probs.data[enc.body_mask, 1] = 0.5
        out.start_probs.data[enc.body_mask, 0] = 0.5
        end_fn = make_end_fn(out, store)
        empty = SpanSet([fallback_span(out, end_fn)], fallback=True)
        lp = span_set_log_prob(out, empty, end_fn)
        np.testing.assert_allclose(lp.item(), math.log(0.125), atol=1e-12)

    def test_deterministic_point_mass(self):
        enc, store, dims, _ = _instance(seed=21, body_len=2, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [1.0, 0.0]
        out.start_probs.data[:, 0] = [0.0, 1.0]
        end_fn = make_end_fn(out, store)
        row = end_fn(0)
        row.data[0] = [1.0, 0.0]
        lp = span_set_log_prob(out, SpanSet([(0, 0)]), end_fn)
        np.testing.assert_allclose(lp.item(), 0.0, atol=1e-12)

    def test_zero_probability_guarded_with_warning(self):
        enc, store, dims, _ = _instance(seed=22, body_len=2, pad_slots=0)
        out = read_article(enc, store, dims)
        out.start_probs.data[:, 1] = [0.0, 0.5]
        out.start_probs.data[:, 0] = [1.0, 0.5]
        end_fn = make_end_fn(out, store)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            lp = span_set_log_prob(out, SpanSet([(0, 1)]), end_fn)
        assert any("zero-probability" in str(w.message) for w in caught)
        assert np.isfinite(lp.item()) and lp.item() < -500

    def test_monotone_in_raised_start_probability(self):
        enc, store, dims, _ = _instance(seed=23, body_len=3, pad_slots=0)
        out = read_article(enc, store, dims)
        end_fn = make_end_fn(out, store)
        target = SpanSet([(1, 2)])
        before = span_set_log_prob(out, target, end_fn).item()
        out.start_probs.data[1] = [
            out.start_probs.data[1, 0] - 0.2,
            out.start_probs.data[1, 1] + 0.2,
        ]
        after = span_set_log_prob(out, target, end_fn).item()
        assert after > before

    def test_gradient_on_six_token_instance(self):
        enc, store, dims, _ = _instance(seed=24, body_len=6, pad_slots=0, d1=8, d2=4)
        out0 = read_article(enc, store, dims)
        fixed = sample_span_set(out0, make_end_fn(out0, store), derive_rng(4))

        def loss():
            out = read_article(enc, store, dims)
            return span_set_log_prob(out, fixed, make_end_fn(out, store))

        reading_params = {n: t for n, t in store.items() if n.startswith("reading.")}
        report = finite_difference_check(
            loss, reading_params, coords_per_param=4, rng=np.random.default_rng(1)
        )
        assert report.max_rel_error < 1e-4


class TestSpanVectors:
    def test_concatenation_in_start_order_with_overlap(self):
        enc, store, dims, _ = _instance(seed=25, body_len=5, pad_slots=0)
        out = read_article(enc, store, dims)
        spans = SpanSet([(0, 2), (1, 3)])
        vecs = span_vectors(out, spans)
        assert vecs.data.shape == (6, dims.d1)
        np.testing.assert_array_equal(vecs.data[1], out.fused.data[1])
        np.testing.assert_array_equal(vecs.data[3], out.fused.data[1])

    def test_span_set_validation(self):
        with pytest.raises(ValueError, match="precedes"):
            SpanSet([(2, 1)])
        with pytest.raises(ValueError, match="duplicate"):
            SpanSet([(1, 2), (1, 3)])


class TestNormalization:
    @pytest.mark.parametrize("m", [1, 2, 3, 4])
    def test_enumerated_mass_is_one(self, m):
        from deepcom.verification import total_span_probability

        enc, store, dims, _ = _instance(seed=30 + m, body_len=m)
        total, _ = total_span_probability(enc, store, dims)
        assert abs(total - 1.0) < 1e-9
