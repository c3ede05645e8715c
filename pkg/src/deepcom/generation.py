"""Generation network: a GRU decoder attending to title states and span vectors.

Each step conditions on the previous token embedding plus fresh attention
contexts over the title and the selected spans, and emits a distribution
over the vocabulary with PAD and BOS masked out.  Decoding is greedy or
beam search over accumulated log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS, EOS, PAD
from .numerics import (
    Tensor,
    add,
    concat,
    gather_rows,
    gru_cell,
    log,
    matmul,
    softmax_rows,
    take,
)
from .params import ModelDims, ParamStore
from .reading import _att_shapes, _gru_shapes, additive_attention


def register_params(store: ParamStore, dims: ModelDims, rng: np.random.Generator) -> None:
    """Create every decoder parameter under the ``gen.`` prefix."""
    d1 = dims.d1
    store.create("gen.embed", (dims.vocab, d1), rng)
    _gru_shapes(store, "gen.gru", 3 * d1, d1, rng)
    _att_shapes(store, "gen.att_title", d1, rng)
    _att_shapes(store, "gen.att_span", d1, rng)
    _att_shapes(store, "gen.att_init", d1, rng)
    store.create("gen.att_init.q", (1, d1), rng)
    store.create("gen.out.w", (3 * d1, dims.vocab), rng)
    store.create("gen.out.b", (dims.vocab,))


@dataclass
class DecoderState:
    """Hidden state plus cached attention inputs for one decode."""

    h: Tensor
    ctx_title: Tensor
    ctx_span: Tensor
    h_title: Tensor
    title_mask: np.ndarray
    h_spans: Tensor
    span_mask: np.ndarray
    t: int = 0


def init_decoder(
    h_title: Tensor, title_mask: np.ndarray, h_spans: Tensor, store: ParamStore
) -> DecoderState:
    """Initial state: attention over stacked title and span vectors."""
    if h_spans.data.shape[0] == 0:
        raise ValueError("decoder needs at least one span vector")
    span_mask = np.ones(h_spans.data.shape[0], dtype=bool)
    stacked = concat([h_title, h_spans], axis=0)
    stacked_mask = np.concatenate([title_mask, span_mask])
    h0 = additive_attention(stacked, store["gen.att_init.q"], store, "gen.att_init", stacked_mask)
    ctx_title = additive_attention(h_title, h0, store, "gen.att_title", title_mask)
    ctx_span = additive_attention(h_spans, h0, store, "gen.att_span", span_mask)
    return DecoderState(
        h=h0,
        ctx_title=ctx_title,
        ctx_span=ctx_span,
        h_title=h_title,
        title_mask=title_mask,
        h_spans=h_spans,
        span_mask=span_mask,
    )


def _vocab_mask(vocab: int) -> np.ndarray:
    mask = np.ones((1, vocab), dtype=bool)
    mask[0, PAD] = False
    mask[0, BOS] = False
    return mask


def decode_step(
    state: DecoderState, prev_token: int, store: ParamStore
) -> tuple[DecoderState, Tensor]:
    """Advance one step; returns the new state and the (1, vocab) distribution."""
    x = concat(
        [gather_rows(store["gen.embed"], [prev_token]), state.ctx_title, state.ctx_span],
        axis=1,
    )
    h = gru_cell(x, state.h, store.group("gen.gru"))
    ctx_title = additive_attention(state.h_title, h, store, "gen.att_title", state.title_mask)
    ctx_span = additive_attention(state.h_spans, h, store, "gen.att_span", state.span_mask)
    logits = add(matmul(concat([h, ctx_title, ctx_span], axis=1), store["gen.out.w"]),
                 store["gen.out.b"])
    probs = softmax_rows(logits, _vocab_mask(logits.data.shape[1]))
    new_state = DecoderState(
        h=h,
        ctx_title=ctx_title,
        ctx_span=ctx_span,
        h_title=state.h_title,
        title_mask=state.title_mask,
        h_spans=state.h_spans,
        span_mask=state.span_mask,
        t=state.t + 1,
    )
    return new_state, probs


def sequence_log_prob(
    comment_ids: np.ndarray,
    comment_mask: np.ndarray,
    h_title: Tensor,
    title_mask: np.ndarray,
    h_spans: Tensor,
    store: ParamStore,
) -> Tensor:
    """Teacher-forced log-likelihood of a BOS...EOS framed comment."""
    if not comment_mask.any() or comment_ids[0] != BOS:
        raise ValueError("comment must be non-empty and BOS-framed")
    state = init_decoder(h_title, title_mask, h_spans, store)
    total = None
    for t in range(1, len(comment_ids)):
        if not comment_mask[t]:
            break
        state, probs = decode_step(state, int(comment_ids[t - 1]), store)
        term = log(take(probs, 0, int(comment_ids[t])))
        total = term if total is None else add(total, term)
    if total is None:
        raise ValueError("comment has no target tokens after BOS")
    return total


@dataclass
class Hypothesis:
    """Partial decode: emitted ids (EOS included once finished) and score."""

    tokens: list[int]
    log_prob: float
    state: DecoderState
    finished: bool = False

    def surface_tokens(self) -> list[int]:
        return [t for t in self.tokens if t != EOS]


def beam_search(
    h_title: Tensor,
    title_mask: np.ndarray,
    h_spans: Tensor,
    store: ParamStore,
    beam: int = 5,
    max_len: int = 50,
    length_normalize: bool = False,
) -> Hypothesis:
    """Beam search over accumulated log-probability.

    Finished hypotheses retire into a completed pool; the best completed
    one wins, falling back to the best live hypothesis if nothing finishes
    within ``max_len`` steps.  Ties keep earlier-generated order.  Scores
    are raw sums unless ``length_normalize`` divides by emitted length.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [Hypothesis([], 0.0, init_decoder(h_title, title_mask, h_spans, store))]
    completed: list[Hypothesis] = []

    def final_score(h: Hypothesis) -> float:
        if length_normalize and h.tokens:
            return h.log_prob / len(h.tokens)
        return h.log_prob

    for _ in range(max_len):
        if not live:
            break
        candidates: list[Hypothesis] = []
        for hyp in live:
            prev = hyp.tokens[-1] if hyp.tokens else BOS
            state, probs = decode_step(hyp.state, prev, store)
            logp = np.log(np.maximum(probs.data[0], 1e-300))
            top = np.argsort(-logp, kind="stable")[:beam]
            for tok in top:
                candidates.append(
                    Hypothesis(
                        hyp.tokens + [int(tok)],
                        hyp.log_prob + float(logp[tok]),
                        state,
                        finished=int(tok) == EOS,
                    )
                )
        keep = sorted(range(len(candidates)), key=lambda i: (-candidates[i].log_prob, i))[:beam]
        live = []
        for i in keep:
            cand = candidates[i]
            if cand.finished:
                completed.append(cand)
            else:
                live.append(cand)
    pool = completed if completed else live
    best = max(enumerate(pool), key=lambda ih: (final_score(ih[1]), -ih[0]))
    return best[1]


def greedy_decode(
    h_title: Tensor, title_mask: np.ndarray, h_spans: Tensor, store: ParamStore, max_len: int = 50
) -> Hypothesis:
    """Single-path decode; identical to beam search with beam=1."""
    return beam_search(h_title, title_mask, h_spans, store, beam=1, max_len=max_len)
