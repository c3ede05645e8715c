"""Shared fixtures: synthetic corpora and desk-scale configurations."""

from __future__ import annotations

import json

import numpy as np

from deepcom.config import RunConfig

WORDS = [f"w{i:02d}" for i in range(40)]


def make_synthetic_corpus(
    path,
    n_articles: int = 20,
    span_len: int = 5,
    comments_per_article: int = 2,
    body_len: int = 36,
    seed: int = 7,
) -> list[dict]:
    """Articles whose comments copy one planted body span verbatim.

    Each body has sentence terminators sprinkled in, one contiguous
    planted span, and comments of the form planted-span + filler, so the
    copied span is both learnable and recoverable.  Returns the per-article
    metadata (planted span position) for assertions.
    """
    rng = np.random.default_rng(seed)
    meta = []
    with open(path, "w", encoding="utf-8") as fh:
        for art in range(n_articles):
            body = [WORDS[int(rng.integers(len(WORDS)))] for _ in range(body_len)]
            for i in range(8, body_len, 9):
                body[i] = "."
            start = 12 + int(rng.integers(6))
            planted = [WORDS[int(rng.integers(len(WORDS)))] for _ in range(span_len)]
            body[start : start + span_len] = planted
            title = [WORDS[int(rng.integers(len(WORDS)))] for _ in range(4)]
            comments = []
            for _ in range(comments_per_article):
                filler = [WORDS[int(rng.integers(len(WORDS)))] for _ in range(6)]
                comments.append(
                    {"tokens": planted + filler, "upvotes": int(rng.integers(10))}
                )
            fh.write(json.dumps({"title": title, "body": body, "comments": comments}) + "\n")
            meta.append({"id": art, "span": (start, start + span_len - 1), "planted": planted})
    return meta


def desk_config(**overrides) -> RunConfig:
    """Small dimensions and step counts that train in seconds."""
    base = dict(
        d1=12,
        d2=4,
        mlp_hidden=12,
        vocab_size=100,
        len_title=6,
        len_body=40,
        len_comment=14,
        batch_size=4,
        pretrain_steps=40,
        max_step=10,
        match_steps=40,
        checkpoint_interval=0,
        seed=1,
    )
    base.update(overrides)
    return RunConfig(**base)
