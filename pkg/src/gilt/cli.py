"""Command line driver: toy-corpus, train, eval-ppl, eval-minpair, generate, parse, tape, bench.

Paths and seeds can also come from environment variables (GILT_CHECKPOINT,
GILT_CORPUS, GILT_METRICS, GILT_SEED, ...); an explicit flag always wins.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from gilt.checkpoint import load_checkpoint, save_checkpoint
from gilt.config import ABLATIONS, Ablation, BeamConfig, GiLTConfig, TrainConfig, read_json, tiny_config
from gilt.corpus import (
    CorpusError,
    Tokenizer,
    build_vocab,
    corpus_report,
    load_corpus,
    save_corpus,
)
from gilt.graph import GraphError, WordAlignment, WordGraph, build_feature_tape
from gilt.infer import (
    Sentence,
    bench,
    generate,
    load_pairs,
    minpair_eval,
    parse,
    perplexity_upper_bound,
)
from gilt.model import GiLT
from gilt.train import TrainingError, train

ENV_PREFIX = "GILT_"


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_int(name: str, default: int) -> int:
    raw = _env(name)
    return default if raw is None else int(raw)


def _parse_edges(text: str) -> list[tuple[int, int]]:
    """``"0-2,2-1"`` -> [(0, 2), (2, 1)]."""
    edges = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        head, sep, dep = item.partition("-")
        if not sep:
            raise ValueError(f"edge {item!r} is not of the form HEAD-DEP")
        edges.append((int(head), int(dep)))
    return edges


def _ablation_from(args) -> Ablation:
    return Ablation(**{name: getattr(args, name) for name in ABLATIONS})


def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("feature ablations")
    g.add_argument("--no-degree", dest="no_degree", action="store_true", help="constant degree row")
    g.add_argument("--no-depth", dest="no_depth", action="store_true", help="constant depth row")
    g.add_argument("--no-distance", dest="no_distance", action="store_true", help="constant distance row")
    g.add_argument("--unweight-degree", dest="unweight_degree", action="store_true",
                   help="count in- and out-edges alike for degree")
    g.add_argument("--unweight-distance", dest="unweight_distance", action="store_true",
                   help="unit edge cost in both directions for distance")


def _add_beam_flags(p: argparse.ArgumentParser, default_beam: int = 10) -> None:
    p.add_argument("--beam", type=int, default=default_beam, help="beam width b")
    p.add_argument("--count-expansions", type=int, default=None,
                   help="counts tried per hypothesis (default min(4, C+1))")


def _beam_config(args, **extra) -> BeamConfig:
    return BeamConfig(beam=args.beam, count_expansions=args.count_expansions, **extra)


def _checkpoint_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", default=_env("CHECKPOINT"), help="checkpoint directory [$GILT_CHECKPOINT]")


def _require(value, flag: str):
    if value is None:
        raise SystemExit(f"error: {flag} is required (flag or environment variable)")
    return value


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- subcommands


def cmd_toy_corpus(args) -> int:
    from gilt.toy import agreement_pairs, toy_corpus

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentences, examples, tokenizer = toy_corpus(args.size, args.seed, args.min_word_freq, args.piece_size)
    save_corpus(out / "corpus.jsonl", examples)
    (out / "tokenizer.json").write_text(json.dumps(tokenizer.to_json(), indent=2, sort_keys=True) + "\n")
    with open(out / "pairs.jsonl", "w") as fh:
        for pair in agreement_pairs(sentences):
            fh.write(json.dumps({"good": pair.good, "bad": pair.bad, "tag": pair.tag}, sort_keys=True) + "\n")
    _print_json({"corpus": str(out / "corpus.jsonl"), "report": corpus_report(examples)})
    return 0


def _tokenizer_for(examples, path) -> Tokenizer:
    if path:
        return Tokenizer.from_json(read_json(path))
    # words that the corpus itself keeps as a single token are the known words
    whole = {ex.tokens[a] for ex in examples for a, b in ex.word_spans if b - a == 1}
    return Tokenizer(frozenset(whole))


def cmd_train(args) -> int:
    corpus_path = _require(args.corpus, "--corpus")
    out = _require(args.out, "--out")
    examples = load_corpus(corpus_path)
    if not examples:
        raise SystemExit(f"error: {corpus_path} holds no examples")
    vocab = build_vocab(examples, args.min_freq)
    report = corpus_report(examples)
    overrides = read_json(args.model_config) if args.model_config else {}
    if args.fit_count:
        overrides["max_count"] = max(report["max_count"], 1)
    overrides["ablation"] = _ablation_from(args)
    if args.preset == "tiny":
        # the tiny preset's small tape tables suit gradient checks, not real corpora
        for cap in ("degree_cap", "distance_cap", "depth_cap"):
            overrides.setdefault(cap, getattr(GiLTConfig, cap))
        cfg = tiny_config(len(vocab), **overrides)
    else:
        cfg = GiLTConfig(vocab_size=len(vocab), **overrides)
    tcfg = TrainConfig.from_dict(read_json(args.train_config)) if args.train_config else TrainConfig()
    changes = {k: v for k, v in (("steps", args.steps), ("lr", args.lr), ("batch_size", args.batch_size))
               if v is not None}
    tcfg = replace(tcfg, seed=args.seed, **changes)
    model = GiLT(cfg, seed=args.seed)

    def progress(m):
        print(f"step {m['step']:5d}  loss {m['loss']:.4f}  tok {m['L_tok']:.4f}  dep {m['L_dep']:.4f}  "
              f"cnt {m['L_cnt']:.4f}  |g| {m['grad_norm']:.3f}  lr {m['lr']:.2e}", file=sys.stderr)

    if args.metrics:
        Path(args.metrics).unlink(missing_ok=True)
    history = train(model, examples, vocab, tcfg, metrics_path=args.metrics,
                    log_every=args.log_every, progress=progress if args.log_every else None)
    tokenizer = _tokenizer_for(examples, args.tokenizer)
    meta = {"train": tcfg.__dict__, "corpus": str(corpus_path), "report": report,
            "final": {k: history[-1][k] for k in ("loss", "L_tok", "L_dep", "L_cnt")} if history else {}}
    save_checkpoint(out, model, vocab, tokenizer, meta)
    _print_json({"checkpoint": str(out), "parameters": model.num_parameters(),
                 "ablation": cfg.ablation.active(), **meta["final"]})
    return 0


def cmd_eval_ppl(args) -> int:
    ck = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    examples = load_corpus(_require(args.corpus, "--corpus"))
    sentences = [Sentence.from_example(ex, ck.vocab) for ex in examples]
    ppl = perplexity_upper_bound(ck.model, sentences, _beam_config(args), ck.vocab.eos_id)
    _print_json({"ppl_upper_bound": ppl, "beam": args.beam, "sentences": len(sentences),
                 "tokens": sum(len(s) + 1 for s in sentences)})
    return 0


def cmd_eval_minpair(args) -> int:
    ck = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    pairs = load_pairs(_require(args.pairs, "--pairs"))
    _print_json(minpair_eval(ck.model, ck.tokenizer, ck.vocab, pairs, _beam_config(args)))
    return 0


def cmd_generate(args) -> int:
    ck = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    prompt = ck.tokenizer.tokenize_with_alignment(args.prompt)[0] if args.prompt else []
    cfg = _beam_config(args, temperature=args.temperature, sample_counts=args.sample_counts)
    for i in range(args.num):
        gen = generate(ck.model, ck.vocab, cfg, prompt, max_len=args.max_len, seed=args.seed + i)
        _print_json({"text": " ".join(_words(gen.tokens)), "tokens": gen.tokens,
                     "edges": [list(e) for e in gen.graph.sorted_edges()],
                     "log_prob": gen.log_prob, "truncated": gen.truncated})
    return 0


def _words(tokens) -> list[str]:
    from gilt.corpus import is_word_start, join_pieces

    words: list[list[str]] = []
    for t in tokens:
        if is_word_start(t) or not words:
            words.append([t])
        else:
            words[-1].append(t)
    return [join_pieces(w) for w in words]


def cmd_parse(args) -> int:
    ck = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    texts = [args.text] if args.text else [line.strip() for line in sys.stdin if line.strip()]
    for text in texts:
        sentence = Sentence.from_text(text, ck.tokenizer, ck.vocab)
        graph = parse(ck.model, sentence, _beam_config(args), ck.vocab.eos_id)
        _print_json({"text": text, "edges": [list(e) for e in graph.sorted_edges()]})
    return 0


def format_tape(tape: np.ndarray, labels: list[str]) -> str:
    """Fixed-width text matrix, one column per position 0..p."""
    names = ("degree", "distance", "depth")
    width = max([len(x) for x in labels] + [len(str(int(v))) for v in tape.ravel()] + [1])
    head = " " * 9 + " ".join(x.rjust(width) for x in labels)
    rows = [f"{name:<9}" + " ".join(str(int(v)).rjust(width) for v in row) for name, row in zip(names, tape)]
    return "\n".join([head, *rows])


def render_tapes(text: str, edges, tokenizer: Tokenizer, settings, position: int | None = None) -> str:
    tokens, spans = tokenizer.tokenize_with_alignment(text)
    if not tokens:
        raise SystemExit("error: empty sentence")
    align = WordAlignment.from_spans(spans)
    graph = WordGraph(align.num_words, frozenset(edges))
    positions = [position] if position is not None else range(1, len(tokens) + 1)
    blocks = []
    for p in positions:
        tape = build_feature_tape(graph, align, p, settings)
        labels = ["<bos>"] + tokens[:p]
        blocks.append(f"position {p} ({tokens[p - 1]!r}, word {align.word_at(p)})\n" + format_tape(tape, labels))
    return "\n\n".join(blocks)


def cmd_tape(args) -> int:
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        settings, tokenizer = ck.model.config.tape_settings, ck.tokenizer
    else:
        cfg = GiLTConfig(vocab_size=4, m_in=args.m_in, m_out=args.m_out, ablation=_ablation_from(args))
        settings, tokenizer = cfg.tape_settings, Tokenizer()
    print(render_tapes(args.text, _parse_edges(args.edges), tokenizer, settings, args.position))
    return 0


def cmd_bench(args) -> int:
    ck = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    beams = [int(b) for b in args.beams.split(",")]
    rows = bench(ck.model, ck.vocab, beams, args.tokens, args.repeats, args.seed)
    if args.json:
        _print_json(rows)
        return 0
    print(f"{'beam':>6} {'tokens/s':>10} {'s/token':>10} {'peak MB':>9} {'max hyps':>9}")
    for r in rows:
        print(f"{r['beam']:>6} {r['tokens_per_s']:>10.2f} {r['sec_per_token']:>10.4f} {r['peak_mb']:>9.2f} "
              f"{r['peak_beam']:>9}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gilt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    seed = _env_int("SEED", 0)

    p = sub.add_parser("toy-corpus", help="write the toy grammar corpus, tokenizer and agreement pairs")
    p.add_argument("--out", default=_env("TOY_DIR", "toy"))
    p.add_argument("--size", type=int, default=50)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--min-word-freq", type=int, default=3)
    p.add_argument("--piece-size", type=int, default=2)
    p.set_defaults(func=cmd_toy_corpus)

    p = sub.add_parser("train", help="train a model and write a checkpoint directory")
    p.add_argument("--corpus", default=_env("CORPUS"))
    p.add_argument("--out", default=_env("CHECKPOINT"))
    p.add_argument("--tokenizer", default=_env("TOKENIZER"), help="tokenizer.json to store with the model")
    p.add_argument("--metrics", default=_env("METRICS"), help="JSON-lines metrics file (overwritten)")
    p.add_argument("--model-config", help="JSON file of model config overrides")
    p.add_argument("--train-config", help="JSON file of training config")
    p.add_argument("--preset", choices=("desk", "tiny"), default="desk")
    p.add_argument("--fit-count", action="store_true", help="set C to the corpus maximum gold count")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--log-every", type=int, default=0)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-ppl", help="perplexity upper bound from beam marginalisation")
    _checkpoint_arg(p)
    p.add_argument("--corpus", default=_env("CORPUS"))
    _add_beam_flags(p)
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("eval-minpair", help="minimal-pair accuracy, per tag and overall")
    _checkpoint_arg(p)
    p.add_argument("--pairs", default=_env("PAIRS"))
    _add_beam_flags(p)
    p.set_defaults(func=cmd_eval_minpair)

    p = sub.add_parser("generate", help="sample sentences with their graphs")
    _checkpoint_arg(p)
    p.add_argument("--prompt", default="")
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--num", type=int, default=1)
    p.add_argument("--temperature", type=float, default=0.0, help="0 decodes greedily")
    p.add_argument("--sample-counts", action="store_true")
    p.add_argument("--seed", type=int, default=seed)
    _add_beam_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("parse", help="most probable graph of a sentence (or stdin lines)")
    _checkpoint_arg(p)
    p.add_argument("--text")
    _add_beam_flags(p)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("tape", help="print the feature tapes of a sentence under a gold graph")
    p.add_argument("--text", required=True)
    p.add_argument("--edges", default="", help="comma-separated HEAD-DEP word indices, 0 is the root")
    p.add_argument("--position", type=int, help="only this model position")
    p.add_argument("--checkpoint", help="take tokenizer and tape settings from a checkpoint")
    p.add_argument("--m-in", type=int, default=1)
    p.add_argument("--m-out", type=int, default=10)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_tape)

    p = sub.add_parser("bench", help="generation speed and peak memory per beam width")
    _checkpoint_arg(p)
    p.add_argument("--beams", default="1,20,100")
    p.add_argument("--tokens", type=int, default=12)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CorpusError, GraphError, TrainingError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def run_cli(argv) -> int:
    """Exit code of one invocation; argparse usage errors become their exit status."""
    try:
        return main(argv)
    except SystemExit as exc:
        code = exc.code
        if isinstance(code, str):
            print(code, file=sys.stderr)
            return 1
        return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
