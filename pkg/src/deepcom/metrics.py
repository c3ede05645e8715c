"""Multi-reference evaluation metrics over tokenized text.

Implements corpus-level clipped n-gram precision with a brevity penalty,
longest-common-subsequence F-measure (best reference per record,
averaged), and TF-IDF n-gram cosine similarity with the IDF table built
from the reference corpus.  Weighted and lexical-resource metrics are
reported as "n/a" so result tables keep a uniform shape.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

from .corpus import FilterConfig, load_corpus


class EvaluationError(ValueError):
    """Inputs unusable for scoring (empty sets, misaligned ids)."""


@dataclass
class EvalRecord:
    """One hypothesis with its reference comments."""

    hypothesis: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise EvaluationError("a record needs at least one reference")
        for seq in [self.hypothesis] + self.references:
            if any(not isinstance(t, str) or not t for t in seq):
                raise EvaluationError("tokens must be non-empty strings")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(records: list[EvalRecord], n: int = 1) -> float:
    """Corpus-level BLEU-n: geometric mean of clipped precisions times a
    brevity penalty computed against closest-length references."""
    if not 1 <= n <= 4:
        raise ValueError("n must be within 1..4")
    if not records:
        raise EvaluationError("no hypotheses to score")
    matched = [0] * n
    total = [0] * n
    hyp_len = 0
    ref_len = 0
    for rec in records:
        hyp_len += len(rec.hypothesis)
        ref_len += min(
            (len(r) for r in rec.references),
            key=lambda L: (abs(L - len(rec.hypothesis)), L),
        )
        for k in range(1, n + 1):
            hyp_counts = _ngrams(rec.hypothesis, k)
            if not hyp_counts:
                continue
            max_ref: Counter = Counter()
            for ref in rec.references:
                for gram, cnt in _ngrams(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], cnt)
            matched[k - 1] += sum(min(cnt, max_ref[gram]) for gram, cnt in hyp_counts.items())
            total[k - 1] += sum(hyp_counts.values())
    if any(t == 0 or m == 0 for m, t in zip(matched, total)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return brevity * math.exp(log_precision)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(records: list[EvalRecord], beta: float = 1.2) -> float:
    """Mean best-reference LCS F-measure with recall weighted by beta^2."""
    if not records:
        raise EvaluationError("no hypotheses to score")
    total = 0.0
    for rec in records:
        best = 0.0
        for ref in rec.references:
            lcs = _lcs_length(rec.hypothesis, ref)
            if lcs == 0:
                continue
            precision = lcs / len(rec.hypothesis)
            recall = lcs / len(ref)
            f = (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
            best = max(best, f)
        total += best
    return total / len(records)


def cider(records: list[EvalRecord], max_n: int = 4) -> float:
    """TF-IDF n-gram cosine similarity, averaged over n in 1..max_n and
    over references, scaled by 10.  IDF counts, per n-gram, the number of
    records whose reference set mentions it."""
    if len(records) < 2:
        raise EvaluationError("idf weights need at least two records")
    doc_freq: list[Counter] = [Counter() for _ in range(max_n)]
    for rec in records:
        for k in range(1, max_n + 1):
            seen: set = set()
            for ref in rec.references:
                seen.update(_ngrams(ref, k))
            for gram in seen:
                doc_freq[k - 1][gram] += 1
    n_docs = len(records)

    def weighted(counts: Counter, k: int) -> dict:
        return {
            gram: cnt * (math.log(n_docs) - math.log(max(doc_freq[k - 1][gram], 1.0)))
            for gram, cnt in counts.items()
        }

    def cosine(v1: dict, v2: dict) -> float:
        dot = sum(w * v2[g] for g, w in v1.items() if g in v2)
        n1 = math.sqrt(sum(w * w for w in v1.values()))
        n2 = math.sqrt(sum(w * w for w in v2.values()))
        if n1 == 0.0 or n2 == 0.0:
            return 0.0
        return dot / (n1 * n2)

    total = 0.0
    for rec in records:
        per_n = 0.0
        for k in range(1, max_n + 1):
            hyp_vec = weighted(_ngrams(rec.hypothesis, k), k)
            sims = [cosine(hyp_vec, weighted(_ngrams(ref, k), k)) for ref in rec.references]
            per_n += sum(sims) / len(sims)
        total += 10.0 * per_n / max_n
    return total / len(records)


NOT_AVAILABLE = "n/a"


def score_records(records: list[EvalRecord]) -> dict:
    """Every supported metric over one record set."""
    report = {f"bleu_{k}": bleu(records, k) for k in (1, 2, 3, 4)}
    report["rouge_l"] = rouge_l(records)
    report["cider"] = cider(records) if len(records) >= 2 else NOT_AVAILABLE
    for absent in ("meteor", "w_bleu_1", "w_meteor", "w_rouge_l", "w_cider"):
        report[absent] = NOT_AVAILABLE
    report["records"] = len(records)
    return report


def evaluate_run(hyp_path, ref_path, per_article: bool = False,
                 filt: FilterConfig | None = None) -> dict:
    """Score a generated JSONL file against the comments of a reference corpus.

    Hypothesis records carry the article id they were generated from; each
    is scored against every comment of that article.
    """
    triples = load_corpus(ref_path, filt)
    by_id = {tr.article_id: tr for tr in triples}
    records = []
    ids = []
    with open(hyp_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            art_id = rec.get("id")
            if art_id not in by_id:
                raise EvaluationError(f"hypothesis id {art_id!r} not present in the reference corpus")
            tr = by_id[art_id]
            if not tr.comments:
                raise EvaluationError(f"article {art_id} has no reference comments")
            records.append(EvalRecord([str(t) for t in rec["comment"]], tr.comments))
            ids.append(art_id)
    if not records:
        raise EvaluationError(f"no hypotheses found in {hyp_path}")
    report = score_records(records)
    if per_article:
        report["per_article"] = [
            {
                "id": art_id,
                "bleu_1": bleu([rec], 1),
                "rouge_l": rouge_l([rec]),
            }
            for art_id, rec in zip(ids, records)
        ]
    return report
