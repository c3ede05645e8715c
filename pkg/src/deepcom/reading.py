"""Reading network: encode an article and define the salient-span distribution.

The pipeline is: per-token body representations enriched with positional
embeddings and self-attention, a GRU encoding of the title, a gated
fusion of title context into each body position, and a prediction head
made of per-position start classifiers plus a pointer network that picks
an end for every start.

A span set is sampled by independent Bernoulli draws over start
positions followed by one categorical draw per start over legal ends.
When no start is drawn the event keeps the empty-set probability mass,
and the decoder is fed a deterministic fallback span (argmax start,
argmax end) so its attention input is never empty; such sets carry
``fallback=True``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import EncodedTriple
from .numerics import (
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    gru_cell,
    log,
    matmul,
    mlp,
    mul,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    take,
    tanh,
    transpose,
)
from .params import ModelDims, ParamStore


def _gru_shapes(store: ParamStore, prefix: str, d_in: int, d_h: int, rng) -> None:
    for gate in ("z", "r", "h"):
        store.create(f"{prefix}.w{gate}", (d_in, d_h), rng)
        store.create(f"{prefix}.u{gate}", (d_h, d_h), rng)
        store.create(f"{prefix}.b{gate}", (d_h,))


def _mlp_shapes(store: ParamStore, prefix: str, sizes: list[int], rng) -> None:
    for i in range(len(sizes) - 1):
        store.create(f"{prefix}.w{i + 1}", (sizes[i], sizes[i + 1]), rng)
        store.create(f"{prefix}.b{i + 1}", (sizes[i + 1],))


def _mlp_layers(store: ParamStore, prefix: str, n: int) -> list[tuple[Tensor, Tensor]]:
    return [(store[f"{prefix}.w{i + 1}"], store[f"{prefix}.b{i + 1}"]) for i in range(n)]


def _att_shapes(store: ParamStore, prefix: str, d: int, rng) -> None:
    store.create(f"{prefix}.wv", (d, d), rng)
    store.create(f"{prefix}.wh", (d, d), rng)
    store.create(f"{prefix}.v", (d, 1), rng)


def register_params(store: ParamStore, dims: ModelDims, rng: np.random.Generator) -> None:
    """Create every reading-network parameter under the ``reading.`` prefix."""
    d1, d2, hidden = dims.d1, dims.d2, dims.hidden
    store.create("reading.embed", (dims.vocab, d1), rng)
    store.create("reading.pos_word", (dims.pos_word_table, d2), rng)
    store.create("reading.pos_sent", (dims.pos_sent_table, d2), rng)
    _mlp_shapes(store, "reading.body_in", [d1 + 2 * d2, hidden, d1], rng)
    _mlp_shapes(store, "reading.body_mix", [2 * d1, hidden, d1], rng)
    _gru_shapes(store, "reading.title_gru", d1, d1, rng)
    store.create("reading.gate.w", (2 * d1, d1), rng)
    store.create("reading.gate.b", (d1,))
    _mlp_shapes(store, "reading.start", [d1, hidden, 2], rng)
    _att_shapes(store, "reading.ptr_att", d1, rng)
    store.create("reading.ptr_att.r", (1, d1), rng)
    _gru_shapes(store, "reading.ptr_gru", 2 * d1, d1, rng)
    _att_shapes(store, "reading.ptr_score", d1, rng)


def additive_attention(
    rows: Tensor, query: Tensor, store: ParamStore, prefix: str, mask: np.ndarray
) -> Tensor:
    """Attention pooling of ``rows`` (m, d) against a (1, d) query.

    Scores are v^T tanh(W_v row + W_h query); the returned context is the
    softmax-weighted combination of rows, restricted to unmasked rows.
    """
    hidden = tanh(add(matmul(rows, store[f"{prefix}.wv"]), matmul(query, store[f"{prefix}.wh"])))
    scores = transpose(matmul(hidden, store[f"{prefix}.v"]))
    weights = softmax_rows(scores, mask.reshape(1, -1))
    return matmul(weights, rows)


def _run_gru(ids: np.ndarray, n_real: int, store: ParamStore, embed_name: str,
             gru_prefix: str, d_h: int) -> list[Tensor]:
    p = store.group(gru_prefix)
    embed = store[embed_name]
    h = constant(np.zeros((1, d_h)))
    states = []
    for k in range(n_real):
        x = gather_rows(embed, [ids[k]])
        h = gru_cell(x, h, p)
        states.append(h)
    return states


def represent_title(enc: EncodedTriple, store: ParamStore, dims: ModelDims) -> Tensor:
    """GRU states over the real title tokens; padded rows are zeros."""
    n_real = int(enc.title_mask.sum())
    if n_real == 0:
        raise ValueError("cannot represent an empty title")
    states = _run_gru(enc.title_ids, n_real, store, "reading.embed", "reading.title_gru", dims.d1)
    n_pad = len(enc.title_ids) - n_real
    if n_pad:
        states.append(constant(np.zeros((n_pad, dims.d1))))
    return concat(states, axis=0)


def represent_body(enc: EncodedTriple, store: ParamStore, dims: ModelDims) -> tuple[Tensor, Tensor]:
    """Positional token representations and self-attended body states.

    Returns (e_hat, h_body), both (len_body, d1) with padded rows zeroed.
    """
    mask = enc.body_mask
    if not mask.any():
        raise ValueError("cannot represent an all-padded body")
    e = gather_rows(store["reading.embed"], enc.body_ids)
    o = gather_rows(store["reading.pos_word"], enc.body_pos_word)
    s = gather_rows(store["reading.pos_sent"], enc.body_pos_sent)
    e_hat = mlp(concat([e, o, s], axis=1), _mlp_layers(store, "reading.body_in", 2))

    mask_col = mask.astype(np.float64).reshape(-1, 1)
    e_hat = mul(e_hat, mask_col)

    m = e_hat.data.shape[0]
    scores = scale(matmul(e_hat, transpose(e_hat)), 1.0 / math.sqrt(dims.d1))
    alpha = softmax_rows(scores, np.broadcast_to(mask, (m, m)))
    c = matmul(alpha, e_hat)
    h_body = mlp(concat([e_hat, c], axis=1), _mlp_layers(store, "reading.body_mix", 2))
    return e_hat, mul(h_body, mask_col)


def fuse(
    h_title: Tensor,
    h_body: Tensor,
    title_mask: np.ndarray,
    body_mask: np.ndarray,
    store: ParamStore,
    dims: ModelDims,
) -> Tensor:
    """Gate title context into each body position."""
    m = h_body.data.shape[0]
    scores = scale(matmul(h_body, transpose(h_title)), 1.0 / math.sqrt(dims.d1))
    alpha = softmax_rows(scores, np.broadcast_to(title_mask, (m, len(title_mask))))
    c_title = matmul(alpha, h_title)
    gate = sigmoid(add(matmul(concat([h_body, c_title], axis=1), store["reading.gate.w"]),
                       store["reading.gate.b"]))
    fused = add(h_body, mul(gate, c_title))
    return mul(fused, body_mask.astype(np.float64).reshape(-1, 1))


def start_distribution(fused: Tensor, body_mask: np.ndarray, store: ParamStore) -> Tensor:
    """Per-position start probabilities, shape (m, 2) with columns (P0, P1).

    Each row is a softmax over a shared position-wise classifier; padded
    positions are forced to (1, 0).
    """
    logits = mlp(fused, _mlp_layers(store, "reading.start", 2))
    probs = softmax_rows(logits)
    p1 = matmul(probs, constant([[0.0], [1.0]]))
    p1 = mul(p1, body_mask.astype(np.float64).reshape(-1, 1))
    p0 = sub(constant(np.ones_like(p1.data)), p1)
    return concat([p0, p1], axis=1)


@dataclass
class ReadingOutputs:
    """Everything the prediction head and the decoder need for one article."""

    h_title: Tensor
    h_body: Tensor
    fused: Tensor
    start_probs: Tensor
    title_mask: np.ndarray
    body_mask: np.ndarray
    ptr_h0: Tensor
    ptr_c0: Tensor


def read_article(enc: EncodedTriple, store: ParamStore, dims: ModelDims) -> ReadingOutputs:
    """Run the full reading stack on one encoded article."""
    h_title = represent_title(enc, store, dims)
    _, h_body = represent_body(enc, store, dims)
    fused = fuse(h_title, h_body, enc.title_mask, enc.body_mask, store, dims)
    start_probs = start_distribution(fused, enc.body_mask, store)
    h0 = additive_attention(fused, store["reading.ptr_att.r"], store, "reading.ptr_att",
                            enc.body_mask)
    c0 = additive_attention(fused, h0, store, "reading.ptr_att", enc.body_mask)
    return ReadingOutputs(
        h_title=h_title,
        h_body=h_body,
        fused=fused,
        start_probs=start_probs,
        title_mask=enc.title_mask,
        body_mask=enc.body_mask,
        ptr_h0=h0,
        ptr_c0=c0,
    )


def end_distribution(out: ReadingOutputs, store: ParamStore, start: int) -> Tensor:
    """Pointer distribution over end positions for one start, shape (1, m).

    Mass is restricted to unpadded positions at or after the start.
    """
    m = out.fused.data.shape[0]
    if not (0 <= start < m) or not out.body_mask[start]:
        raise IndexError(f"start {start} outside the unpadded body")
    v_start = gather_rows(out.fused, [start])
    h1 = gru_cell(concat([out.ptr_c0, v_start], axis=1), out.ptr_h0,
                  store.group("reading.ptr_gru"))
    hidden = tanh(add(matmul(out.fused, store["reading.ptr_score.wv"]),
                      matmul(h1, store["reading.ptr_score.wh"])))
    scores = transpose(matmul(hidden, store["reading.ptr_score.v"]))
    legal = out.body_mask & (np.arange(m) >= start)
    return softmax_rows(scores, legal.reshape(1, -1))


def make_end_fn(out: ReadingOutputs, store: ParamStore):
    """Cache end distributions per start; only queried starts are computed."""
    cache: dict[int, Tensor] = {}

    def end_fn(start: int) -> Tensor:
        if start not in cache:
            cache[start] = end_distribution(out, store, start)
        return cache[start]

    return end_fn


@dataclass
class SpanSet:
    """Ordered (start, end) index pairs into the body.

    ``fallback=True`` marks the no-start event: the listed span exists
    only to give the decoder a non-empty input, and the set's probability
    is that of drawing no start at all.
    """

    spans: list[tuple[int, int]] = field(default_factory=list)
    fallback: bool = False

    def __post_init__(self):
        self.spans = sorted((int(a), int(e)) for a, e in self.spans)
        for a, e in self.spans:
            if a > e:
                raise ValueError(f"span end {e} precedes start {a}")
        starts = [a for a, _ in self.spans]
        if len(set(starts)) != len(starts):
            raise ValueError(f"duplicate span starts in {starts}")

    def starts(self) -> list[int]:
        return [a for a, _ in self.spans]

    def indices(self) -> list[int]:
        return [i for a, e in self.spans for i in range(a, e + 1)]


def fallback_span(out: ReadingOutputs, end_fn) -> tuple[int, int]:
    """Deterministic span used when no start clears: argmax start, argmax end."""
    p1 = out.start_probs.data[:, 1]
    a = int(np.argmax(np.where(out.body_mask, p1, -1.0)))
    e = int(np.argmax(end_fn(a).data[0]))
    return a, e


def sample_span_set(out: ReadingOutputs, end_fn, rng: np.random.Generator) -> SpanSet:
    """Draw starts independently per position, then one end per start."""
    p1 = out.start_probs.data[:, 1]
    draws = rng.random(p1.shape[0]) < p1
    starts = np.flatnonzero(draws & out.body_mask)
    if starts.size == 0:
        return SpanSet([fallback_span(out, end_fn)], fallback=True)
    spans = []
    for a in starts:
        row = end_fn(int(a)).data[0]
        e = int(rng.choice(row.shape[0], p=row / row.sum()))
        spans.append((int(a), e))
    return SpanSet(spans)


def extract_span_set(out: ReadingOutputs, end_fn) -> SpanSet:
    """Deterministic spans: every position with P(start) > 0.5, argmax ends."""
    p1 = out.start_probs.data[:, 1]
    starts = np.flatnonzero((p1 > 0.5) & out.body_mask)
    if starts.size == 0:
        return SpanSet([fallback_span(out, end_fn)], fallback=True)
    spans = []
    for a in starts:
        e = int(np.argmax(end_fn(int(a)).data[0]))
        spans.append((int(a), e))
    return SpanSet(spans)


def span_set_log_prob(out: ReadingOutputs, span_set: SpanSet, end_fn) -> Tensor:
    """Log-probability of a span set under the start/end factorization.

    Sums log P(start) over chosen starts, log P(end | start) per span, and
    log(1 - P(start)) over every other unpadded position.  A fallback set
    scores as the no-start event.  Zero-probability components are clamped
    by the log kernel to a large negative value with a warning.
    """
    starts = [] if span_set.fallback else span_set.starts()
    m = out.start_probs.data.shape[0]
    selector = np.zeros((m, 2))
    selector[out.body_mask, 0] = 1.0
    for a in starts:
        if not out.body_mask[a]:
            raise IndexError(f"span start {a} lands on padding")
        selector[a] = (0.0, 1.0)
    probs = out.start_probs.data[np.arange(m), selector.argmax(axis=1)]
    if np.any(probs[selector.any(axis=1)] <= 0.0):
        warnings.warn("span set contains a zero-probability start component")
    total = sum_all(mul(log(out.start_probs), selector))
    if not span_set.fallback:
        for a, e in span_set.spans:
            row = end_fn(a)
            if row.data[0, e] <= 0.0:
                warnings.warn(f"end {e} has zero probability for start {a}")
            total = add(total, log(take(row, 0, e)))
    return total


def span_vectors(out: ReadingOutputs, span_set: SpanSet) -> Tensor:
    """Fused article vectors covered by the spans, concatenated in start order."""
    idx = span_set.indices()
    if not idx:
        raise ValueError("span set selects no positions")
    return gather_rows(out.fused, idx)
