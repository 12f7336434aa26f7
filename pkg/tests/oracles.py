"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import math

import numpy as np

from gilt.graph import WordGraph


def random_graph(rng: np.random.Generator, max_words: int = 8, density: float | None = None) -> WordGraph:
    n = int(rng.integers(0, max_words + 1))
    p = rng.uniform(0.05, 0.6) if density is None else density
    edges = {(h, d) for d in range(1, n + 1) for h in range(0, n + 1) if h != d and rng.random() < p / 2}
    return WordGraph(n, frozenset(edges))


def brute_force_distance(graph: WordGraph, src: int, dst: int, m_in: int, m_out: int):
    """Cheapest cost over every simple path (exhaustive DFS); None when unreachable."""
    steps: dict[int, list[tuple[int, int]]] = {v: [] for v in range(graph.num_words + 1)}
    for h, d in graph.edges:
        steps[h].append((d, m_out))
        steps[d].append((h, m_in))
    best = math.inf

    def walk(u, cost, seen):
        nonlocal best
        if u == dst:
            best = min(best, cost)
            return
        for v, c in steps[u]:
            if v not in seen:
                seen.add(v)
                walk(v, cost + c, seen)
                seen.remove(v)

    walk(src, 0, {src})
    return None if best == math.inf else best


def connected_to_root(graph: WordGraph) -> set[int]:
    """Union-find over the undirected backbone."""
    parent = list(range(graph.num_words + 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for h, d in graph.edges:
        parent[find(h)] = find(d)
    return {w for w in range(1, graph.num_words + 1) if find(w) == find(0)}


def hop_depths(graph: WordGraph) -> dict[int, int]:
    """Depth by repeated relaxation (Bellman-Ford on unit weights), 0 if detached."""
    n = graph.num_words
    hops = [math.inf] * (n + 1)
    hops[0] = 0
    for _ in range(n + 1):
        for h, d in graph.edges:
            hops[d] = min(hops[d], hops[h] + 1)
            hops[h] = min(hops[h], hops[d] + 1)
    return {w: (0 if hops[w] == math.inf else hops[w] + 1) for w in range(1, n + 1)}


def naive_txl_log_probs(params: dict, ids: np.ndarray, num_layers: int, heads: int) -> np.ndarray:
    """Plain pre-LN Transformer-XL language model written with explicit loops.

    score(k, j) = (W_q h_k + u) . (W_kc h_j) + (W_q h_k + v) . (W_kr r_{k-j}),
    no feature tapes anywhere.  Returns (T, V) log-probabilities for one sequence.
    """
    T = len(ids)
    d = params["tok_emb"].shape[1]
    dh = d // heads

    def ln(x, g, b):
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        return (x - mu) / math.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))

    def rel(offset):
        out = np.empty(d)
        for m in range(d // 2):
            ang = offset / (10000.0 ** (2.0 * m / d))
            out[2 * m] = math.sin(ang)
            out[2 * m + 1] = math.cos(ang)
        return out

    h = [params["tok_emb"][t].copy() for t in ids]
    for l in range(1, num_layers + 1):
        P = {k[len(f"layer{l}."):]: v for k, v in params.items() if k.startswith(f"layer{l}.")}
        x = [ln(v, P["ln1_g"], P["ln1_b"]) for v in h]
        q = [v @ P["wq"] for v in x]
        kc = [v @ P["wkc"] for v in x]
        val = [v @ P["wv"] for v in x]
        new = []
        for k in range(T):
            ctx = np.zeros(d)
            for a in range(heads):
                sl = slice(a * dh, (a + 1) * dh)
                scores = []
                for j in range(k + 1):
                    kr = (rel(k - j) @ P["wkr"])[sl]
                    s = (q[k][sl] + P["u"][a]) @ kc[j][sl] + (q[k][sl] + P["v"][a]) @ kr
                    scores.append(s / math.sqrt(dh))
                scores = np.array(scores)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx[sl] = sum(w[j] * val[j][sl] for j in range(k + 1))
            a_out = h[k] + ctx @ P["wo"]
            f = gelu(ln(a_out, P["ln2_g"], P["ln2_b"]) @ P["ff1_w"] + P["ff1_b"]) @ P["ff2_w"] + P["ff2_b"]
            new.append(a_out + f)
        h = new
    out = []
    for v in h:
        logits = ln(v, params["lnf_g"], params["lnf_b"]) @ params["out_w"] + params["out_b"]
        z = logits - logits.max()
        out.append(z - math.log(np.exp(z).sum()))
    return np.array(out)
