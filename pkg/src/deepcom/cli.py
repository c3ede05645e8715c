"""Command-line entry point exposing the whole pipeline.

Subcommands: build-vocab, train-matcher, make-spans, pretrain, train,
generate, inspect-spans, evaluate, verify.  Every command is driven by a
``key = value`` config file plus ``--set`` overrides, and is reproducible
from its inputs and seed alone.  Exit codes: 0 success, 2 I/O problems,
3 bad configuration, 4 checkpoint mismatch, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import ConfigError, RunConfig, echo_config, load_config
from .corpus import CorpusError, Vocabulary, build_vocab, encode_triple, load_corpus
from .generation import beam_search
from .metrics import EvaluationError, evaluate_run
from .params import CheckpointError, restore_stores, save_checkpoint
from .reading import extract_span_set, make_end_fn, read_article, span_vectors
from .training import (
    GradientNaNError,
    build_matching_model,
    build_model,
    construct_artificial_spans,
    train,
    train_matching_model,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="key = value config file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _cfg(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def _load_vocab_or_build(args, cfg: RunConfig, triples) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    return build_vocab(triples, cfg.vocab_size, cfg.include_comments_in_vocab)


def cmd_build_vocab(args) -> int:
    cfg = _cfg(args)
    triples = load_corpus(args.corpus, cfg.filter_config())
    vocab = build_vocab(triples, cfg.vocab_size, cfg.include_comments_in_vocab)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")
    return EXIT_OK


def cmd_train_matcher(args) -> int:
    cfg = _cfg(args)
    triples = load_corpus(args.corpus, cfg.filter_config())
    vocab = _load_vocab_or_build(args, cfg, triples)
    dims = cfg.model_dims(len(vocab))
    store = train_matching_model(
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
    save_checkpoint(args.out, store)
    print(f"matching model written to {args.out}")
    return EXIT_OK


def cmd_make_spans(args) -> int:
    cfg = _cfg(args)
    triples = load_corpus(args.corpus, cfg.filter_config())
    vocab = _load_vocab_or_build(args, cfg, triples)
    dims = cfg.model_dims(len(vocab))
    match_store = build_matching_model(dims, cfg.seed)
    restore_stores([match_store], args.matcher)
    with open(args.out, "w", encoding="utf-8") as fh:
        for tr in triples:
            spans = construct_artificial_spans(
                tr, vocab, match_store, cfg.match_threshold, cfg.max_ngram
            )
            rec = {
                "id": tr.article_id,
                "spans": [
                    {"start": a, "end": e, "source": tag, "text": tr.body[a : e + 1]}
                    for a, e, tag in spans.spans
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"spans for {len(triples)} articles written to {args.out}")
    return EXIT_OK


def _run_training(args, max_step_override: int | None) -> int:
    cfg = _cfg(args)
    if max_step_override is not None:
        cfg = dataclasses.replace(cfg, max_step=max_step_override)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    triples = load_corpus(args.corpus, cfg.filter_config())
    vocab = build_vocab(triples, cfg.vocab_size, cfg.include_comments_in_vocab)
    vocab.save(run_dir / "vocab.txt")
    (run_dir / "config.txt").write_text(echo_config(cfg), encoding="utf-8")
    result = train(cfg, triples, vocab, run_dir, resume=args.resume)
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _run_training(args, max_step_override=0)


def cmd_train(args) -> int:
    return _run_training(args, max_step_override=None)


def _restore_model(args, cfg: RunConfig, vocab: Vocabulary):
    dims = cfg.model_dims(len(vocab))
    store = build_model(dims, cfg.seed)
    restore_stores([store], args.checkpoint, allow_extra=True)
    return store, dims


def _generation_inputs(args, cfg: RunConfig):
    filt = dataclasses.replace(cfg.filter_config(), min_comments=0)
    triples = load_corpus(args.corpus, filt)
    vocab_path = args.vocab or Path(args.checkpoint).parent / "vocab.txt"
    vocab = Vocabulary.load(vocab_path)
    return triples, vocab


def cmd_generate(args) -> int:
    cfg = _cfg(args)
    triples, vocab = _generation_inputs(args, cfg)
    store, dims = _restore_model(args, cfg, vocab)
    beam = args.beam if args.beam is not None else cfg.beam

    def generate_one(tr):
        enc = encode_triple(
            tr,
            vocab,
            len_title=dims.len_title,
            len_body=dims.len_body,
            len_comment=dims.len_comment,
        )
        out = read_article(enc, store, dims)
        end_fn = make_end_fn(out, store)
        span_set = extract_span_set(out, end_fn)
        h_spans = span_vectors(out, span_set)
        hyp = beam_search(
            out.h_title,
            enc.title_mask,
            h_spans,
            store,
            beam=beam,
            max_len=dims.len_comment,
            length_normalize=cfg.length_normalize,
        )
        return {
            "id": tr.article_id,
            "title": tr.title,
            "spans": [[a, e] for a, e in span_set.spans],
            "comment": [vocab.decode(t) for t in hyp.surface_tokens()],
            "log_prob": hyp.log_prob,
        }

    workers = args.workers if args.workers is not None else cfg.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(generate_one, triples))
    else:
        records = [generate_one(tr) for tr in triples]
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"generated {len(records)} comments to {args.out}")
    return EXIT_OK


def cmd_inspect_spans(args) -> int:
    cfg = _cfg(args)
    triples, vocab = _generation_inputs(args, cfg)
    store, dims = _restore_model(args, cfg, vocab)

    def inspect_one(tr):
        enc = encode_triple(
            tr,
            vocab,
            len_title=dims.len_title,
            len_body=dims.len_body,
            len_comment=dims.len_comment,
        )
        out = read_article(enc, store, dims)
        end_fn = make_end_fn(out, store)
        span_set = extract_span_set(out, end_fn)
        p1 = out.start_probs.data[:, 1]
        return {
            "id": tr.article_id,
            "start_probs": [float(p) for p in p1[enc.body_mask]],
            "fallback": span_set.fallback,
            "spans": [
                {
                    "start": a,
                    "end": e,
                    "text": tr.body[a : e + 1],
                    "p_start": float(p1[a]),
                    "end_prob": float(end_fn(a).data[0, e]),
                }
                for a, e in span_set.spans
            ],
        }

    workers = args.workers if args.workers is not None else cfg.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(inspect_one, triples))
    else:
        records = [inspect_one(tr) for tr in triples]
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"span report for {len(records)} articles written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _cfg(args)
    report = evaluate_run(args.hyp, args.ref, per_article=args.per_article,
                          filt=cfg.filter_config())
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import run_suite

    cfg = _cfg(args)
    results = run_suite(seed=cfg.seed, draws=args.draws)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} of {len(results)} properties failed")
        return 1
    print(f"all {len(results)} properties hold")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepcom",
        description="Read a news article, extract salient spans, and generate comments.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("build-vocab", help="write a frequency-ranked vocabulary file")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = subs.add_parser("train-matcher", help="train the sentence/comment matching model")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vocab", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train_matcher)

    p = subs.add_parser("make-spans", help="emit heuristic supervision spans per article")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vocab", type=Path, default=None)
    p.add_argument("--matcher", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_make_spans)

    p = subs.add_parser("pretrain", help="run the warm-start phase only")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("train", help="full two-phase training")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("generate", help="decode comments with extracted spans")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vocab", type=Path, default=None,
                   help="defaults to vocab.txt beside the checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("inspect-spans", help="report extracted spans and start probabilities")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vocab", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_inspect_spans)

    p = subs.add_parser("evaluate", help="score generated comments against references")
    _add_common(p)
    p.add_argument("--hyp", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--per-article", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("verify", help="run the brute-force oracle property suite")
    _add_common(p)
    p.add_argument("--draws", type=int, default=20000)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except GradientNaNError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, EvaluationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
