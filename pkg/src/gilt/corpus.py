"""Corpus format, tokenizer with word alignment, and vocabulary."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from gilt.graph import (
    FeatureCaps,
    TapeSettings,
    WordAlignment,
    WordGraph,
    build_feature_tape,
    gold_count,
    validate_graph,
)

CONTINUATION = "##"


class CorpusError(ValueError):
    pass


@dataclass
class CorpusExample:
    text: str
    tokens: list
    word_spans: list
    edges: list
    id: str = ""

    def __post_init__(self):
        self.tokens = [str(t) for t in self.tokens]
        self.word_spans = [tuple(int(x) for x in s) for s in self.word_spans]
        self.edges = sorted({(int(h), int(d)) for h, d in self.edges})

    @property
    def num_words(self) -> int:
        return len(self.word_spans)

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def alignment(self) -> WordAlignment:
        return WordAlignment.from_spans(self.word_spans)

    @property
    def graph(self) -> WordGraph:
        return WordGraph(self.num_words, frozenset(self.edges))

    def words(self) -> list[str]:
        return [join_pieces(self.tokens[a:b]) for a, b in self.word_spans]

    def counts(self) -> list[int]:
        return [gold_count(self.edges, i) for i in range(1, self.num_words + 1)]

    def validate(self) -> list[str]:
        problems = []
        if not self.tokens:
            problems.append("empty sentence")
        expected = 0
        for a, b in self.word_spans:
            if a != expected or b <= a:
                problems.append(f"word span {(a, b)} not contiguous/non-empty")
            expected = b
        if expected != len(self.tokens):
            problems.append("word spans do not cover all tokens")
        problems += validate_graph(self.edges, self.num_words)
        return problems

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "tokens": list(self.tokens),
                "word_spans": [list(s) for s in self.word_spans],
                "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusExample":
        return cls(text=obj.get("text", ""), tokens=obj["tokens"], word_spans=obj["word_spans"],
                   edges=obj.get("edges", []), id=str(obj.get("id", "")))


def load_corpus(path) -> list[CorpusExample]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ex = CorpusExample.from_json(obj)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise CorpusError(f"{path}:{lineno}: cannot parse example: {err}") from err
            problems = ex.validate()
            if problems:
                raise CorpusError(f"{path}:{lineno}: example {ex.id or lineno!r} invalid: {'; '.join(problems)}")
            examples.append(ex)
    return examples


def save_corpus(path, examples: Iterable[CorpusExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def corpus_report(examples: Sequence[CorpusExample], settings: TapeSettings | None = None) -> dict:
    """Maxima that size the count head (C) and the tape embedding tables (caps)."""
    report = {"examples": len(examples), "max_words": 0, "max_tokens": 0, "max_count": 0,
              "max_degree": 0, "max_distance": 0, "max_depth": 0}
    if not examples:
        return report
    raw = settings or TapeSettings()
    # unclamped maxima: lift the caps far above anything a sentence can produce
    big = 10 ** 9
    probe = TapeSettings(raw.weights, FeatureCaps(big, big, big), raw.use_degree, raw.use_distance,
                         raw.use_depth, raw.weight_degree, raw.weight_distance)
    for ex in examples:
        report["max_words"] = max(report["max_words"], ex.num_words)
        report["max_tokens"] = max(report["max_tokens"], ex.num_tokens)
        report["max_count"] = max([report["max_count"], *ex.counts()])
        align, graph = ex.alignment, ex.graph
        for word, first in enumerate(align.first_positions(), start=1):
            tape = build_feature_tape(graph, align, first, probe)
            report["max_degree"] = max(report["max_degree"], int(tape[0].max()))
            finite = tape[1][tape[1] < big + 1]
            report["max_distance"] = max(report["max_distance"], int(finite.max(initial=0)))
            report["max_depth"] = max(report["max_depth"], int(tape[2].max()))
    return report


# ---------------------------------------------------------------- tokenizer


def join_pieces(pieces: Sequence[str]) -> str:
    return "".join(p[len(CONTINUATION):] if p.startswith(CONTINUATION) else p for p in pieces)


def is_word_start(token: str) -> bool:
    return not token.startswith(CONTINUATION)


@dataclass
class Tokenizer:
    """Whitespace words; words rarer than ``min_word_freq`` become character pieces.

    Known (frequent) words stay whole.  Other words are cut into ``piece_size``
    character pieces; every piece after the first carries the ``##`` marker,
    which is how generation recognises word starts.
    """

    known_words: frozenset | None = None  # None keeps every word whole
    piece_size: int = 2

    @classmethod
    def from_words(cls, sentences: Iterable[Sequence[str]], min_word_freq: int = 2, piece_size: int = 2):
        counts = Counter(w for s in sentences for w in s)
        return cls(frozenset(w for w, c in counts.items() if c >= min_word_freq), piece_size)

    def split_word(self, word: str) -> list[str]:
        if self.known_words is None or word in self.known_words or len(word) <= self.piece_size:
            return [word]
        n = self.piece_size
        pieces = [word[i:i + n] for i in range(0, len(word), n)]
        return [pieces[0]] + [CONTINUATION + p for p in pieces[1:]]

    def tokenize_with_alignment(self, text: str) -> tuple[list[str], list[tuple[int, int]]]:
        tokens: list[str] = []
        spans: list[tuple[int, int]] = []
        for word in text.split():
            pieces = self.split_word(word)
            spans.append((len(tokens), len(tokens) + len(pieces)))
            tokens.extend(pieces)
        return tokens, spans

    def to_json(self) -> dict:
        known = None if self.known_words is None else sorted(self.known_words)
        return {"known_words": known, "piece_size": self.piece_size}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        known = obj.get("known_words")
        return cls(None if known is None else frozenset(known), int(obj["piece_size"]))


def tokenize_with_alignment(text: str, tokenizer: Tokenizer | None = None):
    return (tokenizer or Tokenizer()).tokenize_with_alignment(text)


def make_example(text: str, edges, tokenizer: Tokenizer, id: str = "") -> CorpusExample:
    tokens, spans = tokenizer.tokenize_with_alignment(text)
    return CorpusExample(text=text, tokens=tokens, word_spans=spans, edges=edges, id=id)


# ---------------------------------------------------------------- vocabulary

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
RESERVED = (BOS, EOS, UNK)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.word_start = np.array([i >= len(RESERVED) and is_word_start(t) for i, t in enumerate(self.itos)])

    bos_id = 0
    eos_id = 1
    unk_id = 2

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_json(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocab(corpus: Iterable[CorpusExample], min_freq: int = 1) -> Vocabulary:
    counts = Counter(t for ex in corpus for t in ex.tokens)
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
