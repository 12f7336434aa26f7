"""Joint token/structure beam search and everything built on it.

Structure decisions for word ``i`` are made at its first token: the count head
and biaffine scorer read the cached states of the previous position plus the
first token's embedding, each hypothesis branches on its most likely counts,
and the beam is pruned by joint log-probability.  Token steps never branch.
"""
from __future__ import annotations

import itertools
import json
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gilt import autodiff as ad
from gilt.autodiff import Tensor, logsumexp
from gilt.config import BeamConfig
from gilt.corpus import CorpusError, Tokenizer, Vocabulary
from gilt.graph import (
    WordAlignment,
    WordGraph,
    add_dependencies,
    build_feature_tape,
    expand_to_tokens,
    word_features,
)
from gilt.model import GiLT
from gilt.train import pair_tape

# ---------------------------------------------------------------- edge selection


def candidate_edges(head_probs: np.ndarray, dep_probs: np.ndarray, word: int) -> list[tuple]:
    """Valid candidates for ``word`` as (prob, j, role, edge); role 0 = word is the head.

    The self pair and (word -> root) are never candidates.
    """
    cands = []
    for j in range(word):
        if j >= 1:
            cands.append((float(head_probs[j]), j, 0, (word, j)))
        cands.append((float(dep_probs[j]), j, 1, (j, word)))
    return cands


def select_top_c_edges(head_probs: np.ndarray, dep_probs: np.ndarray, word: int, c: int):
    """The ``c`` best valid edges for ``word`` and whether ``c`` had to be truncated.

    Ties: higher probability, then smaller j, then word-as-head before word-as-dependent.
    """
    if c < 0:
        raise ValueError("count must be non-negative")
    cands = candidate_edges(head_probs, dep_probs, word)
    cands.sort(key=lambda t: (-t[0], t[1], t[2]))
    truncated = c > len(cands)
    return [edge for *_, edge in cands[:c]], truncated


# ---------------------------------------------------------------- hypotheses


@dataclass
class Hypothesis:
    graph: WordGraph
    counts: tuple = ()
    token_logp: float = 0.0
    count_logp: float = 0.0
    truncated: bool = False
    marked: float | None = None
    tapes: list | None = None

    @property
    def logp(self) -> float:
        return self.token_logp + self.count_logp

    def sort_key(self):
        return (-self.logp, self.counts, tuple(self.graph.sorted_edges()))


@dataclass
class _Beam:
    hyps: list
    cache: object
    reps: np.ndarray  # (b, W + 1, 3d) root + words so far
    mid: np.ndarray  # (b, d) middle-layer state at the last position
    pen: np.ndarray  # (b, d) penultimate-layer state at the last position
    next_logp: np.ndarray  # (b, V)
    word_feats: list  # per hypothesis (W + 1, 3) triples for the current word
    word_of_token: list = field(default_factory=list)

    @property
    def position(self) -> int:
        return len(self.word_of_token)

    @property
    def num_words(self) -> int:
        return self.word_of_token[-1] if self.word_of_token else 0


@dataclass
class BeamResult:
    hypotheses: list  # final beam, best first
    log_marginal: float
    steps: int = 0

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


class BeamSearch:
    def __init__(self, model: GiLT, config: BeamConfig | None = None, record_tapes: bool = False,
                 rng: np.random.Generator | None = None):
        self.model = model
        self.config = config or BeamConfig()
        self.record_tapes = record_tapes
        self.rng = rng or np.random.default_rng(0)
        self.settings = model.config.tape_settings

    # -- state transitions

    def start(self) -> _Beam:
        m = self.model
        d = m.config.model_dim
        hyp = Hypothesis(WordGraph(0), tapes=[] if self.record_tapes else None)
        beam = _Beam([hyp], m.new_cache(), np.zeros((1, 0, 3 * d)), None, None, None,
                     [np.zeros((1, 3), dtype=np.int64)])
        with ad.no_grad():
            beam.reps = m.with_root(Tensor(np.zeros((1, 0, 3 * d)))).data
        self._forward(beam, Vocabulary.bos_id)
        return beam

    def score_next_token(self, beam: _Beam, token: int) -> np.ndarray:
        inc = beam.next_logp[:, token].copy()
        for h, v in zip(beam.hyps, inc):
            h.token_logp += float(v)
        return inc

    def expand_structures(self, beam: _Beam, token: int, forced_edges: Sequence | None = None,
                          forced_count: int | None = None) -> None:
        """Branch every hypothesis on the counts of the word starting with ``token``."""
        m = self.model
        word = beam.num_words + 1
        b = len(beam.hyps)
        pair = np.stack([pair_tape(h.graph.with_words(word), word, self.settings) for h in beam.hyps])
        with ad.no_grad():
            emb = m["tok_emb"].data[np.full(b, token)]
            new_rep = np.concatenate([beam.mid, beam.pen, emb], axis=-1)
            reps = np.concatenate([beam.reps, new_rep[:, None]], axis=1)
            scores = m.dependency_scores(Tensor(reps), np.array([word]), pair[:, None])
            head = scores.head_probs().data[:, 0]
            dep = scores.dep_probs().data[:, 0]
            count_lp = scores.count_log_probs().data[:, 0]
        k = self.config.expansions(m.config.max_count)
        children = []
        for hi, h in enumerate(beam.hyps):
            if forced_edges is not None:
                options = [forced_count if forced_count is not None else len(forced_edges)]
            elif self.config.sample_counts:
                p = np.exp(count_lp[hi] - count_lp[hi].max())
                options = [int(self.rng.choice(len(p), p=p / p.sum()))]
            else:
                options = sorted(range(len(count_lp[hi])), key=lambda c: (-count_lp[hi][c], c))[:k]
            for c in options:
                if forced_edges is not None:
                    edges, trunc = list(forced_edges), False
                else:
                    edges, trunc = select_top_c_edges(head[hi], dep[hi], word, c)
                graph = add_dependencies(h.graph.with_words(word), edges)
                child = Hypothesis(graph, h.counts + (c,), h.token_logp, h.count_logp + float(count_lp[hi][c]),
                                   h.truncated or trunc, h.marked,
                                   None if h.tapes is None else list(h.tapes))
                children.append((child, hi))
        children.sort(key=lambda t: t[0].sort_key())
        children = children[: self.config.beam]
        parents = np.array([hi for _, hi in children])
        beam.hyps = [c for c, _ in children]
        self._reindex(beam, parents)
        beam.reps = reps[parents]
        beam.word_feats = [word_features(h.graph, word, self.settings) for h in beam.hyps]

    def _reindex(self, beam: _Beam, parents: np.ndarray) -> None:
        cache = beam.cache
        for i in range(len(cache.keys)):
            cache.keys[i] = Tensor(cache.keys[i].data[parents])
            cache.values[i] = Tensor(cache.values[i].data[parents])
        beam.mid = beam.mid[parents]
        beam.pen = beam.pen[parents]
        beam.next_logp = beam.next_logp[parents]

    def advance(self, beam: _Beam, token: int, word_start: bool) -> None:
        """Append ``token`` (structure must already be expanded if it starts a word) and run its forward."""
        word = beam.num_words + (1 if word_start else 0)
        if word < 1:
            raise ValueError("the first token must start a word")
        beam.word_of_token.append(word)
        self._forward(beam, token)

    def _forward(self, beam: _Beam, token: int) -> None:
        m = self.model
        p = beam.position
        align = WordAlignment(tuple(beam.word_of_token))
        tapes = np.stack([expand_to_tokens(f, align, p).T for f in beam.word_feats])
        if self.record_tapes:
            for h, t in zip(beam.hyps, tapes):
                h.tapes.append(t.T.copy())
        ids = np.full((len(beam.hyps), 1), token)
        with ad.no_grad():
            out = m.forward(ids, tapes[:, None], positions=np.array([p]), cache=beam.cache)
        L = m.config.num_layers
        beam.mid = out.hiddens[L // 2].data[:, 0]
        beam.pen = out.hiddens[L - 1].data[:, 0]
        beam.next_logp = out.log_probs.data[:, 0]

    def mark(self, beam: _Beam) -> None:
        for h in beam.hyps:
            h.marked = h.logp

    # -- drivers

    def run(self, ids: Sequence[int], alignment: WordAlignment, eos: int | None = None,
            gold_edges: Sequence | None = None, mark_at: int | None = None) -> BeamResult:
        """Score a fixed token sequence (no BOS) under beam search.

        With ``gold_edges`` every word takes exactly its gold edges to earlier words
        (the teacher-forced structure); the count term uses the gold count.
        """
        if len(ids) != alignment.num_tokens:
            raise ValueError("token ids and alignment disagree")
        beam = self.start()
        if mark_at == 0:
            self.mark(beam)
        for p in range(1, len(ids) + 1):
            tok = int(ids[p - 1])
            self.score_next_token(beam, tok)
            start = alignment.is_word_start(p)
            if start:
                if gold_edges is not None:
                    w = alignment.word_at(p)
                    forced = [(h, d) for h, d in gold_edges if max(h, d) == w]
                    self.expand_structures(beam, tok, forced_edges=forced)
                else:
                    self.expand_structures(beam, tok)
            self.advance(beam, tok, start)
            if mark_at == p:
                self.mark(beam)
        if eos is not None:
            self.score_next_token(beam, eos)
        hyps = sorted(beam.hyps, key=Hypothesis.sort_key)
        return BeamResult(hyps, logsumexp([h.logp for h in hyps]), len(ids))


# ---------------------------------------------------------------- sentence-level API


@dataclass
class Sentence:
    """Token ids (no BOS/EOS) with their word alignment."""

    ids: list
    alignment: WordAlignment

    @classmethod
    def from_text(cls, text: str, tokenizer: Tokenizer, vocab: Vocabulary) -> "Sentence":
        tokens, spans = tokenizer.tokenize_with_alignment(text)
        return cls(vocab.encode(tokens), WordAlignment.from_spans(spans))

    @classmethod
    def from_example(cls, example, vocab: Vocabulary) -> "Sentence":
        return cls(vocab.encode(example.tokens), example.alignment)

    def __len__(self):
        return len(self.ids)


def beam_search(model: GiLT, sentence: Sentence, config: BeamConfig, eos: int | None = None,
                **kwargs) -> BeamResult:
    return BeamSearch(model, config, **kwargs).run(sentence.ids, sentence.alignment, eos=eos)


def marginal_log_prob(model: GiLT, sentence: Sentence, config: BeamConfig, eos: int | None = 1) -> float:
    """Beam-marginalised lower bound on log p(x) (EOS included unless ``eos`` is None)."""
    return beam_search(model, sentence, config, eos=eos).log_marginal


def score_structure(model: GiLT, sentence: Sentence, graph: WordGraph, counts: Sequence[int],
                    eos: int | None = 1) -> tuple[float, float]:
    """Joint log p(x, y) from scratch in one teacher-forced pass: (token part, count part)."""
    align = sentence.alignment
    settings = model.config.tape_settings
    n = len(sentence.ids)
    M = align.num_words
    ids = np.asarray([0] + list(sentence.ids))[None]
    tapes = np.zeros((1, n + 1, n + 1, 3), dtype=np.int64)
    for p in range(n + 1):
        tapes[0, p, : p + 1] = build_feature_tape(graph, align, p, settings).T
    pair = np.zeros((1, M, M + 1, 3), dtype=np.int64)
    for i in range(1, M + 1):
        pair[0, i - 1, : i + 1] = pair_tape(graph, i, settings)
    with ad.no_grad():
        fwd = model.forward(ids, tapes)
        first = np.asarray(align.first_positions())[None]
        reps = model.with_root(model.word_representation(fwd.hiddens, fwd.embeddings, first))
        scores = model.dependency_scores(reps, np.arange(1, M + 1), pair)
    lp = fwd.log_probs.data[0]
    targets = list(sentence.ids) + ([eos] if eos is not None else [])
    token = float(sum(lp[p, t] for p, t in enumerate(targets)))
    clp = scores.count_log_probs().data[0]
    count = float(sum(clp[i, c] for i, c in enumerate(counts)))
    return token, count


ORACLE_LIMIT = 10 ** 5


def oracle_exact_marginal(model: GiLT, sentence: Sentence, eos: int | None = 1,
                          return_terms: bool = False):
    """Exact log p(x) over the restricted subspace by enumerating every count assignment.

    Each assignment's graph is materialised word by word with fresh teacher-forced
    passes, then scored in one more pass; no beam machinery is involved.
    """
    align = sentence.alignment
    M = align.num_words
    C = model.config.max_count
    if (C + 1) ** M > ORACLE_LIMIT:
        raise ValueError(f"(C+1)^M = {(C + 1) ** M} exceeds the oracle limit {ORACLE_LIMIT}")
    settings = model.config.tape_settings
    n = len(sentence.ids)
    ids = np.asarray([0] + list(sentence.ids))[None]
    first = np.asarray(align.first_positions())
    terms = []
    for assignment in itertools.product(range(C + 1), repeat=M):
        graph = WordGraph(M)
        for i in range(1, M + 1):
            tapes = np.zeros((1, n + 1, n + 1, 3), dtype=np.int64)
            for p in range(first[i - 1]):
                tapes[0, p, : p + 1] = build_feature_tape(graph, align, p, settings).T
            pair = pair_tape(graph, i, settings)
            with ad.no_grad():
                fwd = model.forward(ids[:, : first[i - 1] + 1], tapes[:, : first[i - 1] + 1, : first[i - 1] + 1])
                reps = model.with_root(model.word_representation(fwd.hiddens, fwd.embeddings, first[None, :i]))
                sc = model.dependency_scores(reps, np.array([i]), pair[None, None])
            edges, _ = select_top_c_edges(sc.head_probs().data[0, 0], sc.dep_probs().data[0, 0], i,
                                          assignment[i - 1])
            graph = add_dependencies(graph, edges)
        tok, cnt = score_structure(model, sentence, graph, assignment, eos)
        terms.append((tok + cnt, assignment, graph))
    value = logsumexp([t[0] for t in terms])
    return (value, terms) if return_terms else value


def perplexity_upper_bound(model: GiLT, sentences: Sequence[Sentence], config: BeamConfig,
                           eos: int = 1) -> float:
    total_lp = 0.0
    total_tokens = 0
    for s in sentences:
        total_lp += marginal_log_prob(model, s, config, eos)
        total_tokens += len(s) + 1
    return float(np.exp(-total_lp / max(total_tokens, 1)))


def parse(model: GiLT, sentence: Sentence, config: BeamConfig, eos: int | None = 1) -> WordGraph:
    """Highest-scoring structure for a fixed token sequence."""
    return beam_search(model, sentence, config, eos=eos).best.graph


def conditional_log_prob(model: GiLT, context: Sentence, full: Sentence, config: BeamConfig) -> float:
    """log p(continuation | context) for ``full`` = context + continuation (word aligned, no EOS)."""
    k = len(context)
    if list(full.ids[:k]) != list(context.ids):
        raise ValueError("full sentence must extend the context")
    if config.conditional_mode == "remarginalize":
        return (marginal_log_prob(model, full, config, eos=None)
                - marginal_log_prob(model, context, config, eos=None))
    res = BeamSearch(model, config).run(full.ids, full.alignment, eos=None, mark_at=k)
    return res.log_marginal - logsumexp([h.marked for h in res.hypotheses])


# ---------------------------------------------------------------- generation


@dataclass
class Generation:
    ids: list
    tokens: list
    graph: WordGraph
    truncated: bool
    log_prob: float
    peak_beam: int = 1


def generate(model: GiLT, vocab: Vocabulary, config: BeamConfig, prompt: Sequence[str] = (),
             max_len: int = 32, seed: int = 0, ignore_eos: bool = False) -> Generation:
    """Sample (or greedily decode) a sentence and its graph.

    The next-token distribution mixes the beam's hypotheses by their posterior
    weight; word boundaries come from the vocabulary's word-start marking.
    """
    rng = np.random.default_rng(seed)
    search = BeamSearch(model, config, rng=rng)
    beam = search.start()
    out: list[int] = []
    banned = np.zeros(len(vocab), dtype=bool)
    banned[[vocab.bos_id, vocab.unk_id]] = True
    prompt_ids = vocab.encode(list(prompt))
    truncated = False
    peak = len(beam.hyps)
    while True:
        if len(out) < len(prompt_ids):
            tok = prompt_ids[len(out)]
        else:
            if len(out) >= max_len:
                truncated = True
                break
            w = np.array([h.logp for h in beam.hyps])
            w = np.exp(w - w.max())
            w /= w.sum()
            mix = (w[:, None] * np.exp(beam.next_logp)).sum(0)
            mask = banned.copy()
            if not out:
                mask |= ~vocab.word_start
                mask[vocab.eos_id] = True
            if ignore_eos:
                mask[vocab.eos_id] = True
            mix = np.where(mask, 0.0, mix)
            if config.temperature <= 0:
                tok = int(np.argmax(mix))
            else:
                logits = np.log(np.maximum(mix, 1e-300)) / config.temperature
                p = np.exp(logits - logits.max())
                p = np.where(mask, 0.0, p)
                tok = int(rng.choice(len(p), p=p / p.sum()))
        search.score_next_token(beam, tok)
        if tok == vocab.eos_id:
            break
        start = bool(vocab.word_start[tok]) or not out
        if start:
            search.expand_structures(beam, tok)
        search.advance(beam, tok, start)
        peak = max(peak, len(beam.hyps))
        out.append(tok)
    best = min(beam.hyps, key=Hypothesis.sort_key)
    return Generation(out, vocab.decode(out), best.graph, truncated, best.logp, peak)


def bench(model: GiLT, vocab: Vocabulary, beams: Sequence[int] = (1, 20, 100), tokens: int = 12,
          repeats: int = 1, seed: int = 0) -> list[dict]:
    """Tokens/s and peak traced memory of generation per beam width.

    Tokens are sampled at temperature 1 so that word starts keep the beam busy
    even for an untrained model, whose greedy choice can stall on one piece.
    """
    rows = []
    for b in beams:
        cfg = BeamConfig(beam=b, temperature=1.0)
        elapsed = 0.0
        produced = 0
        peak = 0
        occupancy = 0
        for r in range(repeats):
            tracemalloc.start()
            t0 = time.perf_counter()
            gen = generate(model, vocab, cfg, max_len=tokens, seed=seed + r, ignore_eos=True)
            elapsed += time.perf_counter() - t0
            peak = max(peak, tracemalloc.get_traced_memory()[1])
            tracemalloc.stop()
            produced += len(gen.ids)
            occupancy = max(occupancy, gen.peak_beam)
            if len(gen.ids) != tokens:
                raise AssertionError("generation changed the requested sequence length")
        rows.append({"beam": b, "tokens": produced, "seconds": elapsed,
                     "tokens_per_s": produced / elapsed, "sec_per_token": elapsed / produced,
                     "peak_mb": peak / 2 ** 20, "peak_beam": occupancy})
    return rows


# ---------------------------------------------------------------- minimal pairs


@dataclass
class MinimalPair:
    good: str
    bad: str
    tag: str = "all"


def load_pairs(path) -> list[MinimalPair]:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append(MinimalPair(str(obj["good"]), str(obj["bad"]), str(obj.get("tag", "all"))))
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise CorpusError(f"{path}:{lineno}: malformed minimal pair: {err}") from err
    return pairs


def minpair_eval(model: GiLT, tokenizer: Tokenizer, vocab: Vocabulary, pairs: Sequence[MinimalPair],
                 config: BeamConfig) -> dict:
    """Fraction of pairs whose good sentence gets a strictly higher marginal; ties fail."""
    per_tag: dict[str, list[bool]] = {}
    cache: dict[str, float] = {}

    def score(text):
        if text not in cache:
            cache[text] = marginal_log_prob(model, Sentence.from_text(text, tokenizer, vocab), config, vocab.eos_id)
        return cache[text]

    for pair in pairs:
        per_tag.setdefault(pair.tag, []).append(score(pair.good) > score(pair.bad))
    hits = [x for v in per_tag.values() for x in v]
    tag_acc = {t: float(np.mean(v)) for t, v in sorted(per_tag.items())}
    return {"accuracy": float(np.mean(hits)) if hits else 0.0, "pairs": len(hits),
            "per_tag": tag_acc, "macro_average": float(np.mean(list(tag_acc.values()))) if tag_acc else 0.0}
