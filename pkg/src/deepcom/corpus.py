"""Corpus ingestion: article-comment triples, vocabulary, encoding, batching.

The corpus file is JSONL with one article per line:

    {"title": [tok, ...], "body": [tok, ...],
     "sentences": [[start, end], ...],            # optional, end exclusive
     "comments": [{"tokens": [...], "upvotes": 3}, ...]}

Tokenization happens upstream; tokens arrive as strings.  When sentence
boundaries are absent they are derived by splitting after terminator
tokens.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

DEFAULT_TERMINATORS = frozenset({".", "!", "?", "。", "！", "？"})


class CorpusError(RuntimeError):
    """Unreadable corpus file or nothing survived filtering."""


@dataclass
class FilterConfig:
    min_body: int = 30
    min_comment: int = 10
    max_comment: int = 100
    max_comments: int = 30
    min_comments: int = 1
    terminators: frozenset[str] = DEFAULT_TERMINATORS


@dataclass
class Triple:
    """One article with its surviving comments.

    ``sentence_index`` / ``within_sentence_index`` give, per body token,
    the 0-based sentence it belongs to and its offset inside that
    sentence.
    """

    title: list[str]
    body: list[str]
    sentence_index: list[int]
    within_sentence_index: list[int]
    comments: list[list[str]]
    article_id: int = 0

    def sentence_spans(self) -> list[tuple[int, int]]:
        """Inclusive (start, end) token ranges, one per sentence."""
        spans = []
        for k, s in enumerate(self.sentence_index):
            if k == 0 or s != self.sentence_index[k - 1]:
                spans.append([k, k])
            else:
                spans[-1][1] = k
        return [tuple(p) for p in spans]


def segment_sentences(body: list[str], terminators=DEFAULT_TERMINATORS) -> list[tuple[int, int]]:
    """Split a body into [start, end) sentence ranges after terminator tokens."""
    spans = []
    start = 0
    for i, tok in enumerate(body):
        if tok in terminators:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(body):
        spans.append((start, len(body)))
    return spans


def _position_indices(n_tokens: int, spans: list[tuple[int, int]]) -> tuple[list[int], list[int]]:
    sent = [0] * n_tokens
    within = [0] * n_tokens
    for s, (lo, hi) in enumerate(spans):
        for k in range(lo, min(hi, n_tokens)):
            sent[k] = s
            within[k] = k - lo
    return sent, within


def load_corpus(path, filt: FilterConfig | None = None) -> list[Triple]:
    """Read and filter a JSONL corpus.

    Malformed lines are counted and skipped.  Bodies shorter than the
    minimum are dropped, comment lengths are bounded, and when upvotes are
    present only the top ``max_comments`` comments are kept.
    """
    filt = filt or FilterConfig()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    triples: list[Triple] = []
    bad_lines = 0
    article_id = -1
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            # ids follow file position so differently filtered loads of the
            # same corpus still agree on which article is which
            article_id += 1
            try:
                rec = json.loads(line)
                title = [str(t) for t in rec["title"]]
                body = [str(t) for t in rec["body"]]
                raw_comments = rec.get("comments", [])
            except (json.JSONDecodeError, KeyError, TypeError):
                bad_lines += 1
                continue
            if len(body) < filt.min_body:
                continue
            comments = []
            for c in raw_comments:
                toks = [str(t) for t in c["tokens"]]
                if filt.min_comment <= len(toks) <= filt.max_comment:
                    comments.append((toks, c.get("upvotes")))
            if len(comments) > filt.max_comments:
                if all(u is not None for _, u in comments):
                    comments.sort(key=lambda cu: -cu[1])
                comments = comments[: filt.max_comments]
            if len(comments) < filt.min_comments:
                continue
            if "sentences" in rec:
                spans = [tuple(p) for p in rec["sentences"]]
            else:
                spans = segment_sentences(body, filt.terminators)
            sent, within = _position_indices(len(body), spans)
            triples.append(
                Triple(
                    title=title,
                    body=body,
                    sentence_index=sent,
                    within_sentence_index=within,
                    comments=[toks for toks, _ in comments],
                    article_id=article_id,
                )
            )
    if bad_lines:
        log.warning("skipped %d malformed corpus lines", bad_lines)
    if not triples:
        raise CorpusError(f"no usable articles in {path}")
    return triples


@dataclass
class Vocabulary:
    """Token <-> id maps with four reserved ids up front."""

    token_to_id: dict[str, int] = field(default_factory=dict)
    id_to_token: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        return [self.encode(t) for t in tokens]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tokens[: len(RESERVED_TOKENS)] != list(RESERVED_TOKENS):
            raise CorpusError(f"vocabulary file {path} lacks the reserved token header")
        vocab = cls()
        vocab.id_to_token = tokens
        vocab.token_to_id = {t: i for i, t in enumerate(tokens)}
        return vocab


def build_vocab(
    triples: list[Triple], max_size: int = 30000, include_comments: bool = True
) -> Vocabulary:
    """Frequency-ranked vocabulary, ties broken lexicographically."""
    if not triples:
        raise CorpusError("cannot build a vocabulary from zero triples")
    counts: dict[str, int] = {}
    for tr in triples:
        streams = [tr.title, tr.body]
        if include_comments:
            streams.extend(tr.comments)
        for stream in streams:
            for tok in stream:
                counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    vocab = Vocabulary()
    vocab.id_to_token = list(RESERVED_TOKENS) + [tok for tok, _ in ranked]
    vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
    return vocab


@dataclass
class EncodedTriple:
    """Fixed-length id arrays for one (article, comment) training pair."""

    article_id: int
    comment_slot: int
    title_ids: np.ndarray
    title_mask: np.ndarray
    body_ids: np.ndarray
    body_mask: np.ndarray
    body_pos_word: np.ndarray
    body_pos_sent: np.ndarray
    comment_ids: np.ndarray
    comment_mask: np.ndarray


def _pad_ids(ids: list[int], length: int) -> tuple[np.ndarray, np.ndarray]:
    ids = ids[:length]
    out = np.full(length, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(length, dtype=bool)
    mask[: len(ids)] = True
    return out, mask


def encode_triple(
    tr: Triple,
    vocab: Vocabulary,
    comment_slot: int = 0,
    len_title: int = 30,
    len_body: int = 600,
    len_comment: int = 50,
    pos_word_clip: int = 99,
    pos_sent_clip: int = 49,
) -> EncodedTriple:
    """Encode one (article, comment) pair with padding and truncation.

    Comments are framed BOS ... EOS; when a comment is longer than the
    frame allows, its tail is cut so the terminating EOS survives.
    """
    title_ids, title_mask = _pad_ids(vocab.encode_tokens(tr.title), len_title)
    body_ids, body_mask = _pad_ids(vocab.encode_tokens(tr.body), len_body)

    n_body = min(len(tr.body), len_body)
    pos_word = np.zeros(len_body, dtype=np.int64)
    pos_sent = np.zeros(len_body, dtype=np.int64)
    pos_word[:n_body] = np.minimum(tr.within_sentence_index[:n_body], pos_word_clip)
    pos_sent[:n_body] = np.minimum(tr.sentence_index[:n_body], pos_sent_clip)

    comment = tr.comments[comment_slot] if tr.comments else []
    framed = [BOS] + vocab.encode_tokens(comment)[: len_comment - 2] + [EOS]
    comment_ids, comment_mask = _pad_ids(framed, len_comment)

    return EncodedTriple(
        article_id=tr.article_id,
        comment_slot=comment_slot,
        title_ids=title_ids,
        title_mask=title_mask,
        body_ids=body_ids,
        body_mask=body_mask,
        body_pos_word=pos_word,
        body_pos_sent=pos_sent,
        comment_ids=comment_ids,
        comment_mask=comment_mask,
    )


def encode_corpus(triples: list[Triple], vocab: Vocabulary, **kwargs) -> list[EncodedTriple]:
    """Expand every (article, comment) pair into one encoded example."""
    encoded = []
    for tr in triples:
        for slot in range(len(tr.comments)):
            encoded.append(encode_triple(tr, vocab, comment_slot=slot, **kwargs))
    return encoded


def batch_iter(encoded: list, batch_size: int, seed: int, epochs: int = 1):
    """Yield shuffled batches; the same seed reproduces the same order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(encoded))
        for lo in range(0, len(encoded), batch_size):
            yield [encoded[i] for i in order[lo : lo + batch_size]]
