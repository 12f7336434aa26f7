"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The overfit model is trained once per session (2000 steps on the 50-sentence
toy corpus, desk config) and shared by the overfit and minimal-pair checks.
"""
import math
import time
from collections import Counter, defaultdict
from dataclasses import replace

import numpy as np
import pytest

from gilt import autodiff as ad
from gilt.autodiff import grad_check
from gilt.config import Ablation, BeamConfig, GiLTConfig, TrainConfig, tiny_config
from gilt.config import ABLATIONS
from gilt.corpus import Tokenizer, build_vocab, make_example
from gilt.graph import UNREACHABLE, FeatureWeights, WordAlignment, all_depths, weighted_degree, weighted_distance
from gilt.infer import (
    BeamSearch,
    Sentence,
    bench,
    marginal_log_prob,
    minpair_eval,
    oracle_exact_marginal,
    parse,
    perplexity_upper_bound,
)
from gilt.model import GiLT
from gilt.toy import agreement_pairs, toy_corpus
from gilt.train import (
    LossWeights,
    collate,
    gold_pair_tapes,
    precompute_tapes,
    prepare,
    teacher_forced_metrics,
    total_loss,
    train,
)
from oracles import brute_force_distance, connected_to_root, hop_depths, naive_txl_log_probs, random_graph

ROWS = {"degree": 0, "distance": 1, "depth": 2}


def _random_sentence(rng, vocab_size, max_words, max_width=2):
    M = int(rng.integers(1, max_words + 1))
    widths = rng.integers(1, max_width + 1, size=M)
    wot = tuple(w + 1 for w, k in enumerate(widths) for _ in range(k))
    return Sentence(list(rng.integers(3, vocab_size, size=len(wot))), WordAlignment(wot))


# ---------------------------------------------------------------- gradient fidelity


def test_gradient_fidelity(report):
    ex = make_example("dogs bark", [(0, 2), (2, 1)], Tokenizer(frozenset(), piece_size=2))
    assert len(ex.tokens) == 4 and len(ex.word_spans) == 2
    vocab = build_vocab([ex])
    model = GiLT(tiny_config(len(vocab)), seed=0)
    batch = collate([prepare(ex, vocab, model.config)])
    t0 = time.perf_counter()
    result = grad_check(lambda: total_loss(model, batch, LossWeights()).total, model.params,
                        eps=1e-5, tolerance=1e-3)
    elapsed = time.perf_counter() - t0
    ok = result.ok and result.worst < 1e-3 and elapsed < 120
    report(ok, "gradient fidelity", f"max rel err {result.worst:.2e} over {model.num_parameters()} "
           f"parameters in {elapsed:.1f}s (need < 1e-3, < 120s)")
    assert ok


# ---------------------------------------------------------------- oracle equivalence


def test_oracle_equivalence(report):
    V = 12
    model = GiLT(tiny_config(V), seed=3)
    assert model.config.max_count == 2
    wide = BeamConfig(beam=10 ** 6, count_expansions=model.config.max_count + 1)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    diffs = []
    for _ in range(25):
        s = _random_sentence(rng, V, max_words=4)
        diffs.append(abs(marginal_log_prob(model, s, wide) - oracle_exact_marginal(model, s)))
    elapsed = time.perf_counter() - t0
    ok = max(diffs) < 1e-9 and elapsed < 300
    report(ok, "oracle equivalence", f"max |log diff| {max(diffs):.2e} on 25 sentences in {elapsed:.1f}s "
           "(need < 1e-9, < 300s)")
    assert ok


# ---------------------------------------------------------------- bound monotonicity


def test_bound_monotonicity(report):
    V = 12
    model = GiLT(tiny_config(V), seed=7)
    rng = np.random.default_rng(77)
    violations = 0
    for _ in range(20):
        s = _random_sentence(rng, V, max_words=6)
        values = [marginal_log_prob(model, s, BeamConfig(beam=b)) for b in (1, 2, 4, 8, 16)]
        # 1e-12 absorbs summation-order rounding only
        violations += sum(a > b + 1e-12 for a, b in zip(values, values[1:]))
    report(violations == 0, "bound monotonicity", f"{violations} violations over 20 sentences, b in 1,2,4,8,16")
    assert violations == 0


# ---------------------------------------------------------------- TXL degeneracy


def test_txl_degeneracy(report):
    V = 11
    rng = np.random.default_rng(1)
    worst = 0.0
    for seed in range(3):
        model = GiLT(tiny_config(V), seed=seed)
        for name, t in model.params.items():
            if name.endswith(".fuse"):
                t.data[...] = 0.0
        T = 7
        ids = rng.integers(0, V, size=T)
        tapes = np.zeros((1, T, T, 3), dtype=np.int64)
        for i, cap in enumerate((16, 32, 8)):
            tapes[..., i] = rng.integers(0, cap + 2, size=(1, T, T))
        with ad.no_grad():
            got = model.forward(ids[None], tapes).log_probs.data[0]
        ref = naive_txl_log_probs(model.params.state(), ids, model.config.num_layers, model.config.heads)
        worst = max(worst, float(np.abs(got - ref).max()))
    report(worst < 1e-10, "TXL degeneracy", f"max abs log-prob diff {worst:.2e} (need < 1e-10)")
    assert worst < 1e-10


# ---------------------------------------------------------------- tape dual path


def test_tape_dual_path(report):
    _, examples, _ = toy_corpus(50, seed=0)
    vocab = build_vocab(examples)
    model = GiLT(GiLTConfig(vocab_size=len(vocab)), seed=0)
    mismatches = 0
    for ex in examples:
        s = Sentence.from_example(ex, vocab)
        res = BeamSearch(model, BeamConfig(beam=1), record_tapes=True).run(s.ids, s.alignment,
                                                                           gold_edges=ex.edges)
        gold = precompute_tapes(ex, model.config.tape_settings)
        same = res.best.graph.edges == set(ex.edges) and len(res.best.tapes) == len(gold)
        mismatches += not (same and all(np.array_equal(a, b) for a, b in zip(res.best.tapes, gold)))
    report(mismatches == 0, "tape dual-path equality", f"{mismatches} mismatching sentences of {len(examples)}")
    assert mismatches == 0


# ---------------------------------------------------------------- feature correctness


def test_feature_correctness(report):
    rng = np.random.default_rng(12345)
    w = FeatureWeights(1, 10)
    unit = FeatureWeights(1, 1)
    mismatches = asymmetric = pairs = 0
    for _ in range(1000):
        g = random_graph(rng, max_words=8)
        n = g.num_words
        for a in range(n + 1):
            for b in range(n + 1):
                pairs += 1
                got = weighted_distance(g, a, b, w)
                want = brute_force_distance(g, a, b, w.m_in, w.m_out)
                mismatches += (None if got is UNREACHABLE else got) != want
                fwd, back = weighted_distance(g, a, b, unit), weighted_distance(g, b, a, unit)
                asymmetric += fwd != back
        reach = connected_to_root(g)
        hops = hop_depths(g)
        depths = all_depths(g)
        for v in range(1, n + 1):
            mismatches += depths[v] != hops[v] or (depths[v] > 0) != (v in reach)
            direct = w.m_out * sum(h == v for h, _ in g.edges) + w.m_in * sum(d == v for _, d in g.edges)
            mismatches += weighted_degree(g, v, w) != direct
    ok = mismatches == 0 and asymmetric == 0
    report(ok, "feature correctness", f"{mismatches} mismatches over 1000 graphs ({pairs} distance pairs), "
           f"{asymmetric} asymmetric pairs at m_in = m_out = 1")
    assert ok


# ---------------------------------------------------------------- overfit


@pytest.fixture(scope="session")
def overfit():
    sentences, examples, tokenizer = toy_corpus(50, seed=0)
    vocab = build_vocab(examples)
    model = GiLT(GiLTConfig(vocab_size=len(vocab)), seed=0)
    t0 = time.perf_counter()
    history = train(model, examples, vocab, TrainConfig(steps=2000, seed=0))
    batch = collate([prepare(ex, vocab, model.config) for ex in examples])
    metrics = teacher_forced_metrics(model, batch)
    sents = [Sentence.from_example(ex, vocab) for ex in examples]
    beam = BeamConfig()
    recovered = sum(parse(model, s, beam, vocab.eos_id).edges == set(ex.edges) for s, ex in zip(sents, examples))
    return {
        "sentences": sentences, "examples": examples, "vocab": vocab, "tokenizer": tokenizer, "model": model,
        "history": history, "seconds": time.perf_counter() - t0, "metrics": metrics,
        "ppl": perplexity_upper_bound(model, sents, beam, vocab.eos_id),
        "parse_recovery": recovered / len(examples),
    }


def _empirical_floor(examples, vocab, settings, with_tapes):
    """Least achievable mean per-token CE on the training set: entropy of the next token given the model's input."""
    table: dict[tuple, Counter] = defaultdict(Counter)
    total = 0
    for ex in examples:
        ids = [vocab.bos_id] + vocab.encode(ex.tokens)
        targets = ids[1:] + [vocab.eos_id]
        tapes = precompute_tapes(ex, settings) if with_tapes else None
        for t, y in enumerate(targets):
            key = (tuple(ids[: t + 1]),)
            if with_tapes:
                key += tuple(tapes[k].tobytes() for k in range(t + 1))
            table[key][y] += 1
            total += 1
    nats = 0.0
    for counts in table.values():
        n = sum(counts.values())
        nats -= sum(c * math.log(c / n) for c in counts.values())
    return nats / total


def test_overfit_structure(overfit, report):
    m = overfit["metrics"]
    ok_edge = m["edge_acc"] == 1.0
    ok_count = m["count_acc"] == 1.0
    ok_parse = overfit["parse_recovery"] >= 0.95
    report(ok_edge, "overfit edge accuracy", f"{m['edge_acc']:.4f} teacher-forced (need 1.0)")
    report(ok_count, "overfit count accuracy", f"{m['count_acc']:.4f} teacher-forced (need 1.0)")
    report(ok_parse, "overfit parse recovery", f"{overfit['parse_recovery']:.2%} of training graphs (need >= 95%)")
    assert ok_edge and ok_count and ok_parse


@pytest.mark.xfail(strict=True, reason="below the empirical entropy floor of the 50-sentence toy corpus; "
                                       "see the decisions ledger")
def test_overfit_token_fit(overfit, report):
    m = overfit["metrics"]
    settings = overfit["model"].config.tape_settings
    floor = _empirical_floor(overfit["examples"], overfit["vocab"], settings, with_tapes=True)
    floor_tokens_only = _empirical_floor(overfit["examples"], overfit["vocab"], settings, with_tapes=False)
    ok_ce = m["token_ce"] < 0.05
    ok_ppl = overfit["ppl"] <= 1.1
    report(ok_ce, "overfit token CE", f"{m['token_ce']:.4f} nats/token (need < 0.05; "
           f"corpus entropy floor {floor:.4f})")
    report(ok_ppl, "overfit PPL upper bound", f"{overfit['ppl']:.4f} (need <= 1.1; "
           f"floor exp({floor_tokens_only:.4f}) = {math.exp(floor_tokens_only):.4f})")
    assert ok_ce and ok_ppl


def test_overfit_minimal_pairs(overfit, report):
    pairs = agreement_pairs(overfit["sentences"])
    result = minpair_eval(overfit["model"], overfit["tokenizer"], overfit["vocab"], pairs, BeamConfig())
    ok = result["accuracy"] > 0.9
    tags = ", ".join(f"{k} {v:.2f}" for k, v in result["per_tag"].items())
    report(ok, "minimal pairs", f"accuracy {result['accuracy']:.3f} on {result['pairs']} pairs ({tags}); need > 0.9")
    assert ok


# ---------------------------------------------------------------- ablation wiring


def test_ablation_wiring(report):
    _, examples, _ = toy_corpus(8, seed=2)
    vocab = build_vocab(examples)
    base_cfg = tiny_config(len(vocab), max_count=4, degree_cap=64, distance_cap=64, depth_cap=32)
    base = base_cfg.tape_settings
    base_shapes = {n: t.shape for n, t in GiLT(base_cfg, seed=0).params.items()}
    intended = {"no_degree": "degree", "no_depth": "depth", "no_distance": "distance",
                "unweight_degree": "degree", "unweight_distance": "distance"}
    problems = []
    for flag in ABLATIONS:
        cfg = replace(base_cfg, ablation=Ablation.only(flag))
        model = GiLT(cfg, seed=0)
        history = train(model, examples, vocab, TrainConfig(steps=3, seed=0))
        sents = [Sentence.from_example(ex, vocab) for ex in examples]
        ppl = perplexity_upper_bound(model, sents, BeamConfig(beam=2), vocab.eos_id)
        if not (np.isfinite(history[-1]["loss"]) and np.isfinite(ppl)):
            problems.append(f"{flag}: non-finite loss or perplexity")
        if {n: t.shape for n, t in model.params.items()} != base_shapes:
            problems.append(f"{flag}: parameter set differs")
        row = ROWS[intended[flag]]
        settings = cfg.tape_settings
        changed = set()
        for ex in examples:
            for mine, ref in zip(precompute_tapes(ex, settings), precompute_tapes(ex, base)):
                changed |= {r for r in range(3) if not np.array_equal(mine[r], ref[r])}
                if flag.startswith("no_") and np.unique(mine[row]).size > 1:
                    problems.append(f"{flag}: row not constant")
            pa, pb = gold_pair_tapes(ex, settings), gold_pair_tapes(ex, base)
            changed |= {r for r in range(3) if not np.array_equal(pa[..., r], pb[..., r])}
        if changed != {row}:
            problems.append(f"{flag}: rows {sorted(changed)} changed, expected [{row}]")
        if flag == "unweight_degree" and (settings.degree_weights != FeatureWeights(1, 1)
                                          or settings.distance_weights != base.distance_weights):
            problems.append(f"{flag}: wrong feature weights")
        if flag == "unweight_distance" and (settings.distance_weights != FeatureWeights(1, 1)
                                            or settings.degree_weights != base.degree_weights):
            problems.append(f"{flag}: wrong feature weights")
    ok = not problems
    report(ok, "ablation wiring", "all five flags train, evaluate and change only their row"
           if ok else "; ".join(problems))
    assert ok


# ---------------------------------------------------------------- efficiency trend


def test_efficiency_trend(report):
    _, examples, _ = toy_corpus(50, seed=0)
    vocab = build_vocab(examples)
    model = GiLT(GiLTConfig(vocab_size=len(vocab)), seed=0)
    tokens = 12
    rows = {r["beam"]: r for r in bench(model, vocab, (1, 20, 100), tokens=tokens, repeats=2)}
    t = {b: r["sec_per_token"] for b, r in rows.items()}
    linear = t[20] <= 20 * t[1] and t[100] <= 5 * t[20] and t[100] <= 100 * t[1]
    lengths = all(r["tokens"] == 2 * tokens for r in rows.values())
    filled = rows[100]["peak_beam"] > 20
    ok = linear and lengths and filled
    report(ok, "efficiency trend", f"s/token b=1 {t[1]:.4f}, b=20 {t[20]:.4f}, b=100 {t[100]:.4f} "
           f"(ratios {t[20] / t[1]:.1f}x, {t[100] / t[1]:.1f}x); max hyps at b=100 {rows[100]['peak_beam']}; "
           f"sequence lengths preserved: {lengths}")
    assert ok
