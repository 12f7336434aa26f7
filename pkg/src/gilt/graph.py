"""Word-level dependency graphs and the degree / distance / depth feature tapes.

Word index 0 is the virtual root; generated words are 1..num_words.  Token
positions follow the model's convention: position 0 is the BOS sentinel and
position ``p >= 1`` is the ``p``-th real token.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ROOT = 0


class GraphError(ValueError):
    pass


class _Unreachable:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNREACHABLE"

    def __reduce__(self):
        return (_Unreachable, ())


UNREACHABLE = _Unreachable()


@dataclass(frozen=True)
class FeatureWeights:
    m_in: int = 1
    m_out: int = 10

    def __post_init__(self):
        if self.m_in <= 0 or self.m_out <= 0:
            raise ValueError("feature weights must be positive integers")
        if not (self.m_in < self.m_out or self.m_in == self.m_out == 1):
            raise ValueError("need 0 < m_in < m_out, or m_in = m_out = 1 (unweighted)")


UNWEIGHTED = FeatureWeights(1, 1)


@dataclass(frozen=True)
class FeatureCaps:
    degree_cap: int = 64
    distance_cap: int = 64
    depth_cap: int = 32

    @property
    def unreachable_bucket(self) -> int:
        return self.distance_cap + 1

    def table_sizes(self) -> tuple[int, int, int]:
        """Embedding vocabulary size per tape row (cap + 2 buckets each)."""
        return (self.degree_cap + 2, self.distance_cap + 2, self.depth_cap + 2)


@dataclass(frozen=True)
class TapeSettings:
    """How the three tape rows are computed, including ablations."""

    weights: FeatureWeights = field(default_factory=FeatureWeights)
    caps: FeatureCaps = field(default_factory=FeatureCaps)
    use_degree: bool = True
    use_distance: bool = True
    use_depth: bool = True
    weight_degree: bool = True
    weight_distance: bool = True

    @property
    def degree_weights(self) -> FeatureWeights:
        return self.weights if self.weight_degree else UNWEIGHTED

    @property
    def distance_weights(self) -> FeatureWeights:
        return self.weights if self.weight_distance else UNWEIGHTED


@dataclass(frozen=True)
class WordGraph:
    """Immutable directed graph over the root (0) and words 1..num_words."""

    num_words: int
    edges: frozenset = frozenset()

    def __post_init__(self):
        if self.num_words < 0:
            raise GraphError("num_words must be non-negative")
        object.__setattr__(self, "edges", frozenset(self.edges))
        for h, d in self.edges:
            _check_edge(h, d, self.num_words)

    def with_words(self, num_words: int) -> "WordGraph":
        if num_words < self.num_words:
            raise GraphError("cannot shrink a graph")
        return WordGraph(num_words, self.edges)

    def restrict(self, num_words: int) -> "WordGraph":
        """Subgraph over root + words 1..num_words."""
        kept = frozenset((h, d) for h, d in self.edges if h <= num_words and d <= num_words)
        return WordGraph(num_words, kept)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def __len__(self):
        return len(self.edges)


def _check_edge(h: int, d: int, num_words: int) -> None:
    if d == ROOT:
        raise GraphError(f"edge ({h}, {d}): root cannot be a dependent")
    if h == d:
        raise GraphError(f"edge ({h}, {d}): self-loop")
    if not (0 <= h <= num_words and 0 <= d <= num_words):
        raise GraphError(f"edge ({h}, {d}) out of range for {num_words} words")


def add_dependencies(graph: WordGraph, new_edges: Iterable[tuple[int, int]]) -> WordGraph:
    new_edges = [(int(h), int(d)) for h, d in new_edges]
    if not new_edges:
        return graph
    for h, d in new_edges:
        _check_edge(h, d, graph.num_words)
    return WordGraph(graph.num_words, graph.edges | frozenset(new_edges))


def _check_word(graph: WordGraph, word: int, allow_root: bool) -> None:
    lo = 0 if allow_root else 1
    if not lo <= word <= graph.num_words:
        raise GraphError(f"word index {word} out of range 1..{graph.num_words}")


def weighted_degree(graph: WordGraph, word: int, w: FeatureWeights) -> int:
    _check_word(graph, word, allow_root=False)
    c_out = sum(1 for h, _ in graph.edges if h == word)
    c_in = sum(1 for _, d in graph.edges if d == word)
    return w.m_out * c_out + w.m_in * c_in


def _weighted_adjacency(graph: WordGraph, w: FeatureWeights) -> list[list[tuple[int, int]]]:
    adj: list[list[tuple[int, int]]] = [[] for _ in range(graph.num_words + 1)]
    for h, d in graph.edges:
        adj[h].append((d, w.m_out))
        adj[d].append((h, w.m_in))
    return adj


def distances_from(graph: WordGraph, src: int, w: FeatureWeights) -> list:
    """Dijkstra from ``src``; entries are ints or UNREACHABLE."""
    _check_word(graph, src, allow_root=True)
    adj = _weighted_adjacency(graph, w)
    dist: list = [UNREACHABLE] * (graph.num_words + 1)
    dist[src] = 0
    heap = [(0, src)]
    done = [False] * (graph.num_words + 1)
    while heap:
        cost, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, c in adj[u]:
            nxt = cost + c
            if dist[v] is UNREACHABLE or nxt < dist[v]:
                dist[v] = nxt
                heapq.heappush(heap, (nxt, v))
    return dist


def weighted_distance(graph: WordGraph, src: int, dst: int, w: FeatureWeights):
    _check_word(graph, dst, allow_root=True)
    return distances_from(graph, src, w)[dst]


def all_depths(graph: WordGraph) -> dict[int, int]:
    """BFS from the root over the undirected backbone; depth = hops + 1, 0 if detached."""
    adj: list[list[int]] = [[] for _ in range(graph.num_words + 1)]
    for h, d in graph.edges:
        adj[h].append(d)
        adj[d].append(h)
    depth = {w: 0 for w in range(1, graph.num_words + 1)}
    visited = [False] * (graph.num_words + 1)
    visited[ROOT] = True
    queue = deque([(ROOT, 0)])
    while queue:
        u, hops = queue.popleft()
        for v in adj[u]:
            if not visited[v]:
                visited[v] = True
                depth[v] = hops + 2
                queue.append((v, hops + 1))
    return depth


def bucketize(value, cap: int) -> int:
    if value is UNREACHABLE:
        return cap + 1
    return min(int(value), cap)


def word_features(graph: WordGraph, current_word: int, settings: TapeSettings) -> np.ndarray:
    """Bucketed (degree, distance, depth) per word 0..num_words, seen from ``current_word``.

    Row 0 (the root) is the all-zero sentinel triple; it has no token column but
    is used by the biaffine scorer's positional embedding.
    """
    caps = settings.caps
    n = graph.num_words
    out = np.zeros((n + 1, 3), dtype=np.int64)
    if n == 0:
        return out
    if settings.use_degree:
        dw = settings.degree_weights
        c_out = np.zeros(n + 1, dtype=np.int64)
        c_in = np.zeros(n + 1, dtype=np.int64)
        for h, d in graph.edges:
            c_out[h] += 1
            c_in[d] += 1
        deg = dw.m_out * c_out + dw.m_in * c_in
        out[1:, 0] = np.minimum(deg[1:], caps.degree_cap)
    if settings.use_distance:
        dist = distances_from(graph, current_word, settings.distance_weights)
        out[1:, 1] = [bucketize(v, caps.distance_cap) for v in dist[1:]]
    if settings.use_depth:
        depths = all_depths(graph)
        out[1:, 2] = [bucketize(depths[w], caps.depth_cap) for w in range(1, n + 1)]
    return out


@dataclass(frozen=True)
class WordAlignment:
    """Token-to-word map.  ``word_of_token[t]`` is the (1-based) word of token t (0-based)."""

    word_of_token: tuple

    def __post_init__(self):
        wot = tuple(int(w) for w in self.word_of_token)
        object.__setattr__(self, "word_of_token", wot)
        prev = 0
        for w in wot:
            if w not in (prev, prev + 1) or w < 1:
                raise GraphError(f"word spans must be contiguous and start at word 1: {wot}")
            prev = w

    @classmethod
    def from_spans(cls, spans: Sequence[Sequence[int]]) -> "WordAlignment":
        wot = []
        expected = 0
        for i, (start, end) in enumerate(spans, start=1):
            if start != expected or end <= start:
                raise GraphError(f"bad word span {(start, end)} at word {i}")
            wot.extend([i] * (end - start))
            expected = end
        return cls(tuple(wot))

    @property
    def num_tokens(self) -> int:
        return len(self.word_of_token)

    @property
    def num_words(self) -> int:
        return self.word_of_token[-1] if self.word_of_token else 0

    def word_at(self, position: int) -> int:
        """Word of model position ``position`` (1-based token position; 0 is BOS)."""
        if not 1 <= position <= self.num_tokens:
            raise GraphError(f"position {position} outside 1..{self.num_tokens}")
        return self.word_of_token[position - 1]

    def first_position(self, word: int) -> int:
        return self.word_of_token.index(word) + 1

    def first_positions(self) -> list[int]:
        """Model position of the first token of each word, indexed by word - 1."""
        firsts = []
        prev = 0
        for t, w in enumerate(self.word_of_token):
            if w != prev:
                firsts.append(t + 1)
                prev = w
        return firsts

    def is_word_start(self, position: int) -> bool:
        return position >= 1 and (position == 1 or self.word_at(position) != self.word_at(position - 1))

    def spans(self) -> list[tuple[int, int]]:
        firsts = [p - 1 for p in self.first_positions()]
        return list(zip(firsts, firsts[1:] + [self.num_tokens]))


def expand_to_tokens(word_feats: np.ndarray, alignment: WordAlignment, upto: int) -> np.ndarray:
    """Columns 0..upto of a tape (3 x (upto+1)) from per-word feature rows."""
    tape = np.zeros((3, upto + 1), dtype=np.int64)
    if upto > 0:
        words = np.asarray(alignment.word_of_token[:upto])
        tape[:, 1:] = word_feats[words].T
    return tape


def build_feature_tape(
    graph: WordGraph, alignment: WordAlignment, current_token: int, settings: TapeSettings
) -> np.ndarray:
    """Feature tape for model position ``current_token`` as a 3 x (current_token+1) array.

    Rows are degree, distance, depth; column 0 is the BOS sentinel.
    """
    if current_token < 0 or current_token > alignment.num_tokens:
        raise GraphError(f"token {current_token} outside alignment of {alignment.num_tokens} tokens")
    if current_token == 0:
        return np.zeros((3, 1), dtype=np.int64)
    word = alignment.word_at(current_token)
    if graph.num_words < word:
        raise GraphError(f"graph has {graph.num_words} words but token {current_token} is in word {word}")
    sub = graph.restrict(word)
    return expand_to_tokens(word_features(sub, word, settings), alignment, current_token)


def validate_graph(graph: WordGraph | Sequence[tuple[int, int]], num_words: int | None = None) -> list[str]:
    """Diagnostics for a gold graph; accepts raw edge lists so malformed input can be reported."""
    if isinstance(graph, WordGraph):
        edge_list = list(graph.edges)
        n = graph.num_words
    else:
        edge_list = [(int(h), int(d)) for h, d in graph]
        n = num_words if num_words is not None else max((max(e) for e in edge_list), default=0)
    problems = []
    seen = set()
    for h, d in edge_list:
        if (h, d) in seen:
            problems.append(f"duplicate edge ({h}, {d})")
        seen.add((h, d))
        if d == ROOT:
            problems.append(f"root-as-dependent edge ({h}, {d})")
        if h == d:
            problems.append(f"self-loop ({h}, {d})")
        if not (0 <= h <= n and 0 <= d <= n):
            problems.append(f"edge ({h}, {d}) out of range")
    succ: dict[int, list[int]] = {}
    for h, d in seen:
        if h != d:
            succ.setdefault(h, []).append(d)
    # iterative three-colour DFS
    color: dict[int, int] = {}
    for start in sorted(succ):
        if color.get(start):
            continue
        stack = [(start, iter(sorted(succ.get(start, ()))))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
            elif color.get(nxt, 0) == 1:
                problems.append(f"cycle through ({node}, {nxt})")
            elif color.get(nxt, 0) == 0:
                color[nxt] = 1
                stack.append((nxt, iter(sorted(succ.get(nxt, ())))))
    return problems


def gold_count(edges: Iterable[tuple[int, int]], word: int) -> int:
    """Number of edges joining ``word`` to the root or an earlier word."""
    return sum(1 for h, d in edges if (h == word and d < word) or (d == word and h < word))
