"""Command-line interface: gen-corpus, upcycle, verify, train, eval, analyze."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .analytics import evaluate_perplexity, routing_analytics
from .config import load_settings
from .corpus import CorpusManifest, default_languages, generate_corpus, language_streams, load_corpus
from .dense import DenseCheckpoint
from .hybrid import HybridCheckpoint
from .run import train_run
from .segment_moe import SegmentMoEConfig
from .token_moe import TokenMoEConfig
from .upcycle import fidelity_check, upcycle


def _cmd_gen_corpus(args) -> int:
    languages = default_languages(num_high=args.num_high, num_low=args.num_low)
    manifest = CorpusManifest(
        total_tokens=args.total_tokens,
        low_fraction=args.low_fraction,
        heldout_fraction=args.heldout_fraction,
    )
    stats = generate_corpus(languages, manifest, args.seed, args.out, vocab_size=args.vocab_size)
    print(json.dumps(stats, indent=2))
    return 0


def _cmd_upcycle(args) -> int:
    dense = ckpt_io.load(args.input)
    if not isinstance(dense, DenseCheckpoint):
        print(f"error: {args.input} is not a dense checkpoint", file=sys.stderr)
        return 2
    hidden = dense.config.hidden_size
    tok_cfg = TokenMoEConfig(num_experts=args.tok_experts, top_k=args.top_k, hidden_size=hidden)
    seg_cfg = SegmentMoEConfig(
        num_experts=args.seg_experts,
        window=args.window,
        capacity_factor=args.capacity_c,
        hidden_size=hidden,
    )
    hybrid = upcycle(dense, tok_cfg, seg_cfg)
    ckpt_io.save(hybrid, args.output)
    print(f"wrote hybrid checkpoint: {args.output} ({len(hybrid.params)} tensors)")
    return 0


def _cmd_verify(args) -> int:
    dense = ckpt_io.load(args.dense)
    hybrid = ckpt_io.load(args.hybrid)
    if not isinstance(dense, DenseCheckpoint) or not isinstance(hybrid, HybridCheckpoint):
        print("error: verify needs --dense <dense.ckpt> and --hybrid <hybrid.ckpt>", file=sys.stderr)
        return 2
    worst = fidelity_check(dense, hybrid, probes=args.probes, seed=args.seed, max_len=args.max_len)
    ok = worst <= args.tolerance
    print(f"max |logit delta| over {args.probes} probes: {worst:.3e} "
          f"({'OK' if ok else 'FAIL'}, tolerance {args.tolerance:.1e})")
    return 0 if ok else 1


def _cmd_train(args) -> int:
    overrides = {}
    if args.resume:
        overrides["init_checkpoint"] = args.resume
    settings = load_settings(args.config, **overrides)
    summary = train_run(settings)
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_eval(args) -> int:
    model = ckpt_io.load(args.ckpt)
    streams = language_streams(load_corpus(Path(args.corpus) / f"{args.split}.tsv"))
    table = evaluate_perplexity(model, streams, seq_len=args.seq_len, n_blocks=args.blocks)
    print(json.dumps(table, indent=2))
    return 0


def _cmd_analyze(args) -> int:
    model = ckpt_io.load(args.ckpt)
    if not isinstance(model, HybridCheckpoint):
        print("error: analyze requires a hybrid checkpoint", file=sys.stderr)
        return 2
    streams = language_streams(load_corpus(Path(args.corpus) / f"{args.split}.tsv"))
    report = routing_analytics(model, streams, seq_len=args.seq_len, n_blocks=args.blocks)
    report.save(args.out)
    top2 = {str(l): {lang: report.top2_string(l, lang) for lang in report.languages}
            for l in report.layers}
    print(json.dumps(top2, indent=2))
    print(f"report files written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hymoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic multi-language corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--total-tokens", type=int, default=200_000)
    p.add_argument("--low-fraction", type=float, default=0.9)
    p.add_argument("--heldout-fraction", type=float, default=0.1)
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--num-high", type=int, default=1)
    p.add_argument("--num-low", type=int, default=1)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("upcycle", help="convert a dense checkpoint to the hybrid layout")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--tok-experts", type=int, default=6)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--seg-experts", type=int, default=6)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--capacity-c", type=float, default=1.0)
    p.set_defaults(func=_cmd_upcycle)

    p = sub.add_parser("verify", help="check upcycling fidelity against the dense model")
    p.add_argument("--dense", required=True)
    p.add_argument("--hybrid", required=True)
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("train", help="run training per a flat key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity per language")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--blocks", type=int, default=8)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="routing-specialization report for a hybrid checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="heldout")
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--blocks", type=int, default=8)
    p.set_defaults(func=_cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
