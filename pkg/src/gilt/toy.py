"""A small probabilistic grammar that emits sentences with consistent dependency graphs.

The graphs are semantic-style DAGs: coordinated subjects have two heads (the
conjunction and the verb), so not every gold graph is a tree.  The verb agrees
in number with its subject, with optional prepositional attractors, which is
what the agreement minimal-pair suite probes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gilt.corpus import CorpusExample, Tokenizer, make_example
from gilt.infer import MinimalPair

NOUNS = [("dog", "dogs"), ("cat", "cats"), ("bird", "birds"), ("farmer", "farmers")]
ADJECTIVES = ["big", "old"]
RARE_ADJECTIVES = ["enormous", "ridiculous"]
PREPOSITIONS = ["near", "behind"]
INTRANSITIVE = [("runs", "run"), ("sleeps", "sleep")]
TRANSITIVE = [("sees", "see"), ("chases", "chase")]
ADVERBS = ["today", "outside"]


@dataclass
class ToySentence:
    words: list
    edges: list
    verb: int  # 1-based index of the main verb
    verb_forms: tuple  # (singular, plural)
    plural: bool
    tag: str

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def with_verb_number(self, plural: bool) -> str:
        words = list(self.words)
        words[self.verb - 1] = self.verb_forms[1 if plural else 0]
        return " ".join(words)


class _Builder:
    def __init__(self):
        self.words: list[str] = []
        self.edges: list[tuple[int, int]] = []

    def add(self, word: str) -> int:
        self.words.append(word)
        return len(self.words)

    def edge(self, head: int, dep: int):
        self.edges.append((head, dep))


def _noun_phrase(b: _Builder, rng, plural: bool, p_adj: float) -> int:
    det = b.add("the")
    adj = None
    if rng.random() < p_adj:
        pool = RARE_ADJECTIVES if rng.random() < 0.25 else ADJECTIVES
        adj = b.add(pool[rng.integers(len(pool))])
    noun = b.add(NOUNS[rng.integers(len(NOUNS))][int(plural)])
    b.edge(noun, det)
    if adj is not None:
        b.edge(noun, adj)
    return noun


def sample_sentence(rng: np.random.Generator) -> ToySentence:
    b = _Builder()
    r = rng.random()
    if r < 0.2:
        first = _noun_phrase(b, rng, bool(rng.integers(2)), 0.0)
        conj = b.add("and")
        b.edge(conj, first)
        second = _noun_phrase(b, rng, bool(rng.integers(2)), 0.0)
        b.edge(conj, second)
        subjects, plural, tag = [first, second], True, "coordination"
    else:
        plural = bool(rng.integers(2))
        head = _noun_phrase(b, rng, plural, 0.3)
        subjects, tag = [head], "simple"
        if rng.random() < 0.35:
            prep = b.add(PREPOSITIONS[rng.integers(len(PREPOSITIONS))])
            b.edge(head, prep)
            obj = _noun_phrase(b, rng, bool(rng.integers(2)), 0.0)
            b.edge(prep, obj)
            tag = "attractor"
    transitive = rng.random() < 0.5
    forms = (TRANSITIVE if transitive else INTRANSITIVE)[rng.integers(2)]
    verb = b.add(forms[int(plural)])
    b.edge(0, verb)
    for s in subjects:
        b.edge(verb, s)
    if transitive:
        obj = _noun_phrase(b, rng, bool(rng.integers(2)), 0.3)
        b.edge(verb, obj)
    if rng.random() < 0.3:
        adv = b.add(ADVERBS[rng.integers(len(ADVERBS))])
        b.edge(verb, adv)
    return ToySentence(b.words, b.edges, verb, forms, plural, tag)


def generate_sentences(n: int, seed: int = 0) -> list[ToySentence]:
    rng = np.random.default_rng(seed)
    return [sample_sentence(rng) for _ in range(n)]


def toy_corpus(n: int = 50, seed: int = 0, min_word_freq: int = 3, piece_size: int = 2):
    """Sentences, their corpus examples and the tokenizer fitted on them.

    Words seen fewer than ``min_word_freq`` times are split into character pieces,
    so the corpus contains genuine multi-token words.
    """
    sentences = generate_sentences(n, seed)
    tokenizer = Tokenizer.from_words([s.words for s in sentences], min_word_freq, piece_size)
    examples = [make_example(s.text, s.edges, tokenizer, id=f"toy-{i}") for i, s in enumerate(sentences)]
    return sentences, examples, tokenizer


def agreement_pairs(sentences) -> list[MinimalPair]:
    """Good/bad pairs that differ only in the number of the main verb."""
    pairs = []
    seen = set()
    for s in sentences:
        good = s.text
        if good in seen:
            continue
        seen.add(good)
        pairs.append(MinimalPair(good, s.with_verb_number(not s.plural), s.tag))
    return pairs
