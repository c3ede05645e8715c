"""Two-phase learning: supervised warm start, then latent-span optimization.

Phase one derives an artificial span set per article (exact n-gram
matches against its comments plus sentences the matching model scores
above a threshold) and maximizes the joint log-likelihood of those spans
and the comments.  Phase two maximizes the latent-variable lower bound
with single-sample score-function gradients: the comment log-likelihood
term propagates pathwise, the span log-probability term is weighted by
the comment log-likelihood minus a learned per-example baseline and a
mini-batch baseline, and the baseline network is regressed toward the
residual after every model update.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EncodedTriple, Triple, Vocabulary, encode_triple
from .generation import register_params as register_gen_params
from .generation import sequence_log_prob
from .numerics import (
    Tape,
    Tensor,
    add,
    concat,
    constant,
    gather_rows,
    gru_cell,
    log,
    mlp,
    mul,
    scale,
    sigmoid,
    sub,
)
from .params import (
    ModelDims,
    OptimizerState,
    ParamStore,
    adagrad_update,
    restore_stores,
    save_checkpoint,
    sgd_update,
)
from .reading import (
    SpanSet,
    extract_span_set,
    make_end_fn,
    read_article,
    register_params as register_reading_params,
    sample_span_set,
    span_set_log_prob,
    span_vectors,
)

log_ = logging.getLogger(__name__)

PHASE_PRETRAIN = 1
PHASE_LOWER_BOUND = 2


class GradientNaNError(ArithmeticError):
    """A gradient came back NaN or infinite; the step was aborted."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter {param_name}")
        self.param_name = param_name


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent, reproducible stream for (seed, purpose, step, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def build_model(dims: ModelDims, seed: int) -> ParamStore:
    """Reading plus generation parameters in one store."""
    store = ParamStore()
    rng = derive_rng(seed, 0)
    register_reading_params(store, dims, rng)
    register_gen_params(store, dims, rng)
    return store


def collect_grads(tape: Tape, store: ParamStore) -> dict[str, np.ndarray]:
    return {name: tape.grad(t) for name, t in store.items()}


def check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise GradientNaNError(name)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients so their joint norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ---------------------------------------------------------------------------
# sequence-pair scorers (matching model and baseline network)
# ---------------------------------------------------------------------------


def register_pair_scorer(store: ParamStore, prefix: str, dims: ModelDims,
                         rng: np.random.Generator) -> None:
    """Two GRU encoders plus a three-layer scorer head.

    Initialization differs from the main model's tiny Gaussian: a scorer
    this deep needs unit-scale embeddings and fan-in-scaled matrices to
    keep its tanh layers out of their linear regime, otherwise it cannot
    express title/comment agreement at desk dimensions.  The final layer
    starts near zero so untrained scores sit at one half.
    """
    d1, hidden = dims.d1, dims.hidden
    store.create(f"{prefix}.embed", (dims.vocab, d1), rng, std=1.0)
    for side in ("a", "b"):
        for gate in ("z", "r", "h"):
            store.create(f"{prefix}.gru_{side}.w{gate}", (d1, d1), rng, std=d1 ** -0.5)
            store.create(f"{prefix}.gru_{side}.u{gate}", (d1, d1), rng, std=d1 ** -0.5)
            store.create(f"{prefix}.gru_{side}.b{gate}", (d1,))
    sizes = [2 * d1, hidden, hidden, 1]
    for i in range(3):
        std = 0.01 if i == 2 else sizes[i] ** -0.5
        store.create(f"{prefix}.mlp.w{i + 1}", (sizes[i], sizes[i + 1]), rng, std=std)
        store.create(f"{prefix}.mlp.b{i + 1}", (sizes[i + 1],))


def _encode_last_state(store: ParamStore, prefix: str, side: str, ids: list[int]) -> Tensor:
    p = store.group(f"{prefix}.gru_{side}")
    embed = store[f"{prefix}.embed"]
    d_h = p["uz"].data.shape[0]
    h = constant(np.zeros((1, d_h)))
    for i in ids:
        h = gru_cell(gather_rows(embed, [int(i)]), h, p)
    return h


def pair_score(store: ParamStore, prefix: str, ids_a: list[int], ids_b: list[int]) -> Tensor:
    """Raw scalar score for a (text, comment) pair; callers squash as needed."""
    if not ids_a or not ids_b:
        raise ValueError("pair scorer needs non-empty token sequences")
    h_a = _encode_last_state(store, prefix, "a", ids_a)
    h_b = _encode_last_state(store, prefix, "b", ids_b)
    layers = [(store[f"{prefix}.mlp.w{i + 1}"], store[f"{prefix}.mlp.b{i + 1}"]) for i in range(3)]
    return mlp(concat([h_a, h_b], axis=1), layers)


def matching_score(store: ParamStore, ids_a: list[int], ids_b: list[int]) -> Tensor:
    return sigmoid(pair_score(store, "match", ids_a, ids_b))


def baseline_value(store: ParamStore, ids_title: list[int], ids_comment: list[int]) -> Tensor:
    return pair_score(store, "base", ids_title, ids_comment)


def build_matching_model(dims: ModelDims, seed: int) -> ParamStore:
    store = ParamStore()
    register_pair_scorer(store, "match", dims, derive_rng(seed, 1))
    return store


def build_baseline_net(dims: ModelDims, seed: int) -> ParamStore:
    store = ParamStore()
    register_pair_scorer(store, "base", dims, derive_rng(seed, 5))
    return store


def train_matching_model(
    triples: list[Triple],
    vocab: Vocabulary,
    dims: ModelDims,
    steps: int = 200,
    negatives_per_positive: int = 1,
    batch_size: int = 8,
    seed: int = 0,
    lr: float = 0.15,
    acc0: float = 0.1,
) -> ParamStore:
    """Binary cross-entropy on true (title, comment) pairs versus comments
    stolen from other articles."""
    if len(triples) < 2:
        raise ValueError("matching model needs at least two articles for negatives")
    store = build_matching_model(dims, seed)
    opt = OptimizerState(store, mode="adagrad", lr=lr, acc0=acc0)
    positives = [
        (i, vocab.encode_tokens(tr.title), vocab.encode_tokens(c))
        for i, tr in enumerate(triples)
        for c in tr.comments
    ]
    for step in range(steps):
        rng = derive_rng(seed, 11, step)
        picks = rng.choice(len(positives), size=min(batch_size, len(positives)), replace=False)
        with Tape() as tape:
            for t in store.tensors().values():
                tape.watch(t)
            loss = None
            count = 0
            for k in picks:
                art, title_ids, comment_ids = positives[k]
                score = matching_score(store, title_ids, comment_ids)
                term = scale(log(score), -1.0)
                loss = term if loss is None else add(loss, term)
                count += 1
                others = [j for j, (a, _, _) in enumerate(positives) if a != art]
                for _ in range(negatives_per_positive):
                    neg_comment = positives[int(rng.choice(others))][2]
                    neg = matching_score(store, title_ids, neg_comment)
                    term = scale(log(sub(constant(1.0), neg)), -1.0)
                    loss = add(loss, term)
                    count += 1
            loss = scale(loss, 1.0 / count)
            tape.backward(loss)
            grads = collect_grads(tape, store)
        check_finite(grads)
        adagrad_update(opt, grads)
    return store


# ---------------------------------------------------------------------------
# artificial spans
# ---------------------------------------------------------------------------

NGRAM_MATCH = "ngram_match"
SENTENCE_MATCH = "sentence_match"


@dataclass
class ArtificialSpanSet:
    """Heuristic supervision spans with their provenance."""

    spans: list[tuple[int, int, str]]

    def to_span_set(self, len_body: int) -> SpanSet:
        """Clip to the encoded body and keep one span (the longest) per start."""
        best: dict[int, int] = {}
        clipped = False
        for a, e, _ in self.spans:
            if a >= len_body:
                clipped = True
                continue
            if e >= len_body:
                clipped = True
                e = len_body - 1
            best[a] = max(best.get(a, a), e)
        if clipped:
            warnings.warn("artificial spans clipped to the truncated body")
        if not best:
            raise ValueError("no artificial span survives body truncation")
        return SpanSet(sorted(best.items()))


def construct_artificial_spans(
    triple: Triple,
    vocab: Vocabulary,
    match_store: ParamStore,
    threshold: float = 0.4,
    max_ngram: int = 6,
) -> ArtificialSpanSet:
    """Exact n-gram matches against the article's comments, plus sentences
    the matching model pairs with any comment above the threshold."""
    spans: dict[tuple[int, int], str] = {}
    body = triple.body
    comment_ngrams: set[tuple[str, ...]] = set()
    for c in triple.comments:
        for n in range(1, max_ngram + 1):
            for i in range(len(c) - n + 1):
                comment_ngrams.add(tuple(c[i : i + n]))
    for n in range(1, max_ngram + 1):
        for i in range(len(body) - n + 1):
            if tuple(body[i : i + n]) in comment_ngrams:
                spans.setdefault((i, i + n - 1), NGRAM_MATCH)

    best_sentence = None
    best_score = -1.0
    for lo, hi in triple.sentence_spans():
        sent_ids = vocab.encode_tokens(body[lo : hi + 1])
        top = 0.0
        for c in triple.comments:
            s = matching_score(match_store, sent_ids, vocab.encode_tokens(c)).item()
            top = max(top, s)
        if top > threshold:
            spans.setdefault((lo, hi), SENTENCE_MATCH)
        if top > best_score:
            best_score = top
            best_sentence = (lo, hi)
    if not spans and best_sentence is not None:
        spans[best_sentence] = SENTENCE_MATCH
    ordered = sorted(spans.items())
    return ArtificialSpanSet([(a, e, tag) for (a, e), tag in ordered])


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def pretrain_step(
    batch: list[tuple[EncodedTriple, SpanSet]],
    store: ParamStore,
    dims: ModelDims,
    opt: OptimizerState,
) -> dict[str, float]:
    """One warm-start step: maximize log P(spans) + log P(comment | spans)."""
    logp_c_total = 0.0
    with Tape() as tape:
        for t in store.tensors().values():
            tape.watch(t)
        loss = None
        for enc, span_set in batch:
            out = read_article(enc, store, dims)
            end_fn = make_end_fn(out, store)
            lp_s = span_set_log_prob(out, span_set, end_fn)
            h_spans = span_vectors(out, span_set)
            lp_c = sequence_log_prob(
                enc.comment_ids, enc.comment_mask, out.h_title, enc.title_mask, h_spans, store
            )
            term = scale(add(lp_s, lp_c), -1.0)
            loss = term if loss is None else add(loss, term)
            logp_c_total += lp_c.item() / len(batch)
        loss = scale(loss, 1.0 / len(batch))
        tape.backward(loss)
        grads = collect_grads(tape, store)
        loss_value = loss.item()
    check_finite(grads)
    norm = global_norm(grads)
    adagrad_update(opt, grads)
    return {"loss": loss_value, "mean_log_p": logp_c_total, "baseline": 0.0, "grad_norm": norm}


def mc_gradient_step(
    batch: list[EncodedTriple],
    store: ParamStore,
    base_store: ParamStore,
    dims: ModelDims,
    rng: np.random.Generator,
    samples: int = 1,
    lr_model: float = 0.01,
    clip_norm: float = 5.0,
    opt_baseline: OptimizerState | None = None,
) -> dict[str, float]:
    """One lower-bound step with sampled span sets and baselined weights.

    The comment log-likelihood gradient flows pathwise (a sample fixes the
    span indices, not the vectors behind them); the span log-probability
    gradient is weighted by the residual of the comment log-likelihood
    after subtracting the learned per-example baseline and the mini-batch
    average residual.  The baseline network is then regressed toward that
    same residual without touching model parameters.
    """
    logp_c_total = 0.0
    with Tape() as tape:
        for t in store.tensors().values():
            tape.watch(t)
        staged = []
        for enc in batch:
            out = read_article(enc, store, dims)
            end_fn = make_end_fn(out, store)
            drawn = []
            for _ in range(samples):
                span_set = sample_span_set(out, end_fn, rng)
                lp_s = span_set_log_prob(out, span_set, end_fn)
                h_spans = span_vectors(out, span_set)
                lp_c = sequence_log_prob(
                    enc.comment_ids, enc.comment_mask, out.h_title, enc.title_mask, h_spans, store
                )
                drawn.append((span_set, lp_s, lp_c))
            title_ids = [int(i) for i in enc.title_ids[enc.title_mask]]
            comment_ids = [int(i) for i in enc.comment_ids[enc.comment_mask]]
            b_psi = baseline_value(base_store, title_ids, comment_ids).item()
            staged.append((drawn, b_psi, title_ids, comment_ids))

        residuals = [
            lp_c.item() - b_psi for drawn, b_psi, _, _ in staged for _, _, lp_c in drawn
        ]
        batch_baseline = float(np.mean(residuals))

        loss = None
        for drawn, b_psi, _, _ in staged:
            obj = None
            for span_set, lp_s, lp_c in drawn:
                coeff = lp_c.item() - b_psi - batch_baseline
                term = add(lp_c, scale(lp_s, coeff))
                obj = term if obj is None else add(obj, term)
                logp_c_total += lp_c.item() / (len(staged) * len(drawn))
            term = scale(obj, -1.0 / len(drawn))
            loss = term if loss is None else add(loss, term)
        loss = scale(loss, 1.0 / len(staged))
        tape.backward(loss)
        grads = collect_grads(tape, store)
    check_finite(grads)
    norm = clip_by_global_norm(grads, clip_norm)
    sgd_update(OptimizerState(store, mode="sgd", lr=lr_model), grads)

    if opt_baseline is not None:
        with Tape() as tape:
            for t in base_store.tensors().values():
                tape.watch(t)
            loss_b = None
            count = 0
            for drawn, _, title_ids, comment_ids in staged:
                b = baseline_value(base_store, title_ids, comment_ids)
                for _, _, lp_c in drawn:
                    target = lp_c.item() - batch_baseline
                    diff = sub(constant(target), b)
                    term = mul(diff, diff)
                    loss_b = term if loss_b is None else add(loss_b, term)
                    count += 1
            loss_b = scale(loss_b, 1.0 / count)
            tape.backward(loss_b)
            base_grads = collect_grads(tape, base_store)
        check_finite(base_grads)
        clip_by_global_norm(base_grads, clip_norm)
        adagrad_update(opt_baseline, base_grads)

    mean_b_psi = float(np.mean([b for _, b, _, _ in staged]))
    return {
        "loss": -logp_c_total,
        "mean_log_p": logp_c_total,
        "baseline": mean_b_psi + batch_baseline,
        "grad_norm": norm,
    }


# ---------------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------------


def prepare_training_pairs(
    triples: list[Triple],
    vocab: Vocabulary,
    match_store: ParamStore,
    dims: ModelDims,
    threshold: float = 0.4,
    max_ngram: int = 6,
) -> list[tuple[EncodedTriple, SpanSet]]:
    """Encode every (article, comment) pair and attach its article's spans."""
    pairs = []
    for tr in triples:
        artificial = construct_artificial_spans(tr, vocab, match_store, threshold, max_ngram)
        span_set = artificial.to_span_set(dims.len_body)
        for slot in range(len(tr.comments)):
            enc = encode_triple(
                tr,
                vocab,
                comment_slot=slot,
                len_title=dims.len_title,
                len_body=dims.len_body,
                len_comment=dims.len_comment,
            )
            pairs.append((enc, span_set))
    return pairs


def _sample_batch(pairs: list, batch_size: int, rng: np.random.Generator) -> list:
    take_n = min(batch_size, len(pairs))
    idx = rng.choice(len(pairs), size=take_n, replace=False)
    return [pairs[i] for i in idx]


def mean_extracted_log_prob(
    pairs: list[tuple[EncodedTriple, SpanSet]], store: ParamStore, dims: ModelDims
) -> float:
    """Mean comment log-likelihood under deterministically extracted spans."""
    total = 0.0
    for enc, _ in pairs:
        out = read_article(enc, store, dims)
        end_fn = make_end_fn(out, store)
        span_set = extract_span_set(out, end_fn)
        h_spans = span_vectors(out, span_set)
        lp_c = sequence_log_prob(
            enc.comment_ids, enc.comment_mask, out.h_title, enc.title_mask, h_spans, store
        )
        total += lp_c.item()
    return total / len(pairs)


class TrainResult:
    def __init__(self, run_dir: Path, final_checkpoint: Path):
        self.run_dir = run_dir
        self.final_checkpoint = final_checkpoint


def train(cfg, triples: list[Triple], vocab: Vocabulary, run_dir, resume: bool = False) -> TrainResult:
    """Run the full optimization loop and leave artifacts in ``run_dir``.

    Writes ``matcher.ckpt``, periodic ``phaseN_stepK.ckpt`` files, a JSONL
    ``train_log.jsonl`` with one record per step, and ``final.ckpt``
    holding model plus baseline parameters and accumulators.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dims = cfg.model_dims(len(vocab))

    store = build_model(dims, cfg.seed)
    base_store = build_baseline_net(dims, cfg.seed)

    start_phase, start_step = PHASE_PRETRAIN, 0
    if resume:
        candidates = sorted(run_dir.glob("phase*_step*.ckpt"))
        if candidates:
            latest = max(
                candidates,
                key=lambda p: (int(p.stem.split("_")[0][5:]), int(p.stem.split("step")[1])),
            )
            meta = restore_stores([store, base_store], latest)
            start_phase = int(meta.get("phase", PHASE_PRETRAIN))
            start_step = int(meta.get("step", 0)) + 1
            log_.info("resuming from %s (phase %d, step %d)", latest, start_phase, start_step)

    match_store = train_matching_model(
        triples,
        vocab,
        dims,
        steps=cfg.match_steps,
        negatives_per_positive=cfg.match_negatives,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        lr=cfg.lr_pretrain,
        acc0=cfg.adagrad_acc0,
    )
    save_checkpoint(run_dir / "matcher.ckpt", match_store)
    pairs = prepare_training_pairs(
        triples, vocab, match_store, dims, cfg.match_threshold, cfg.max_ngram
    )

    log_path = run_dir / "train_log.jsonl"
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8")

    def emit(step: int, phase: int, diag: dict) -> None:
        rec = {
            "step": step,
            "phase": phase,
            "loss": diag["loss"],
            "mean_log_p": diag["mean_log_p"],
            "baseline": diag["baseline"],
            "grad_norm": diag["grad_norm"],
        }
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log_fh.flush()

    def checkpoint(phase: int, step: int) -> None:
        path = run_dir / f"phase{phase}_step{step:06d}.ckpt"
        save_checkpoint(path, [store, base_store], {"phase": phase, "step": step})

    opt_pre = OptimizerState(store, mode="adagrad", lr=cfg.lr_pretrain, acc0=cfg.adagrad_acc0)
    opt_base = OptimizerState(base_store, mode="adagrad", lr=cfg.lr_pretrain, acc0=cfg.adagrad_acc0)

    try:
        if start_phase == PHASE_PRETRAIN:
            for step in range(start_step, cfg.pretrain_steps):
                batch = _sample_batch(pairs, cfg.batch_size, derive_rng(cfg.seed, 3, step))
                diag = pretrain_step(batch, store, dims, opt_pre)
                emit(step, PHASE_PRETRAIN, diag)
                if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                    checkpoint(PHASE_PRETRAIN, step)
            start_step = 0

        encoded_only = [enc for enc, _ in pairs]
        for step in range(start_step, cfg.max_step):
            batch = _sample_batch(encoded_only, cfg.batch_size, derive_rng(cfg.seed, 4, step))
            diag = mc_gradient_step(
                batch,
                store,
                base_store,
                dims,
                derive_rng(cfg.seed, 6, step),
                samples=cfg.mc_samples,
                lr_model=cfg.lr_sgd,
                clip_norm=cfg.clip_norm,
                opt_baseline=opt_base,
            )
            emit(step, PHASE_LOWER_BOUND, diag)
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                checkpoint(PHASE_LOWER_BOUND, step)
    finally:
        log_fh.close()

    final = run_dir / "final.ckpt"
    save_checkpoint(final, [store, base_store], {"phase": PHASE_LOWER_BOUND, "step": cfg.max_step})
    return TrainResult(run_dir, final)
