"""Teacher-forced training: gold tapes, targets, the joint loss and the Adam loop."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gilt import autodiff as ad
from gilt.autodiff import Tensor
from gilt.config import GiLTConfig, TrainConfig
from gilt.corpus import CorpusExample, Vocabulary, corpus_report
from gilt.graph import TapeSettings, WordGraph, build_feature_tape, word_features
from gilt.model import GiLT


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- per-example preprocessing


def precompute_tapes(example: CorpusExample, settings: TapeSettings) -> list[np.ndarray]:
    """Gold tape for every model position 0..N (0 is BOS), each of shape (3, p + 1)."""
    problems = example.validate()
    if problems:
        raise TrainingError(f"gold graph of {example.id!r} invalid: {'; '.join(problems)}")
    graph, align = example.graph, example.alignment
    return [build_feature_tape(graph, align, p, settings) for p in range(example.num_tokens + 1)]


def pair_tape(graph: WordGraph, word: int, settings: TapeSettings) -> np.ndarray:
    """(word + 1, 3) feature triples of root..word as seen from ``word`` before its edges exist."""
    partial = graph.restrict(word - 1).with_words(word)
    return word_features(partial, word, settings)


def gold_pair_tapes(example: CorpusExample, settings: TapeSettings) -> np.ndarray:
    M = example.num_words
    out = np.zeros((M, M + 1, 3), dtype=np.int64)
    graph = example.graph
    for i in range(1, M + 1):
        out[i - 1, : i + 1] = pair_tape(graph, i, settings)
    return out


@dataclass
class TrainingTargets:
    next_tokens: np.ndarray  # (N + 1,) target at model positions 0..N, ending with EOS
    adjacency: np.ndarray  # (M + 1, M + 1), [h, d] = 1 iff gold edge h -> d
    counts: np.ndarray  # (M,) hot index of each one-hot count vector

    def count_one_hot(self, max_count: int) -> np.ndarray:
        out = np.zeros((len(self.counts), max_count + 1))
        out[np.arange(len(self.counts)), self.counts] = 1.0
        return out


def derive_targets(example: CorpusExample, vocab: Vocabulary, max_count: int) -> TrainingTargets:
    ids = vocab.encode(example.tokens)
    M = example.num_words
    adj = np.zeros((M + 1, M + 1), dtype=np.int64)
    for h, d in example.edges:
        adj[h, d] = 1
    counts = np.asarray(example.counts(), dtype=np.int64)
    if counts.size and counts.max() > max_count:
        word = int(np.argmax(counts)) + 1
        raise TrainingError(f"example {example.id!r}: word {word} has {counts.max()} gold dependencies "
                            f"but the count head allows at most C={max_count}; raise max_count")
    return TrainingTargets(np.asarray(ids + [vocab.eos_id], dtype=np.int64), adj, counts)


@dataclass
class Prepared:
    """An example with everything the teacher-forced pass needs."""

    example: CorpusExample
    ids: np.ndarray  # (N + 1,) BOS + tokens
    tapes: list
    pair_tapes: np.ndarray
    first_positions: np.ndarray  # (M,)
    targets: TrainingTargets


def prepare(example: CorpusExample, vocab: Vocabulary, config: GiLTConfig) -> Prepared:
    settings = config.tape_settings
    ids = np.asarray([vocab.bos_id] + vocab.encode(example.tokens), dtype=np.int64)
    return Prepared(example, ids, precompute_tapes(example, settings), gold_pair_tapes(example, settings),
                    np.asarray(example.alignment.first_positions(), dtype=np.int64),
                    derive_targets(example, vocab, config.max_count))


@dataclass
class Batch:
    ids: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T)
    token_weights: np.ndarray  # (B, T): 1/N_b on real predictions
    tapes: np.ndarray  # (B, T, T, 3)
    first_positions: np.ndarray  # (B, M)
    pair_tapes: np.ndarray  # (B, M, M + 1, 3)
    head_targets: np.ndarray  # (B, M, M + 1): target of cell (i, j)
    dep_targets: np.ndarray  # (B, M, M + 1): target of cell (j, i)
    head_mask: np.ndarray
    dep_mask: np.ndarray
    cell_weights: np.ndarray  # (B,): 1 / (number of scored cells)
    counts: np.ndarray  # (B, M)
    word_weights: np.ndarray  # (B, M): 1/M_b on real words

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def collate(items: Sequence[Prepared]) -> Batch:
    B = len(items)
    T = max(len(p.ids) for p in items)
    M = max(p.example.num_words for p in items)
    ids = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    tw = np.zeros((B, T))
    tapes = np.zeros((B, T, T, 3), dtype=np.int64)
    first = np.ones((B, M), dtype=np.int64)
    pair = np.zeros((B, M, M + 1, 3), dtype=np.int64)
    head_t = np.zeros((B, M, M + 1))
    dep_t = np.zeros((B, M, M + 1))
    head_m = np.zeros((B, M, M + 1), dtype=bool)
    dep_m = np.zeros((B, M, M + 1), dtype=bool)
    cw = np.zeros(B)
    counts = np.zeros((B, M), dtype=np.int64)
    ww = np.zeros((B, M))
    for b, p in enumerate(items):
        n = len(p.ids)
        m = p.example.num_words
        ids[b, :n] = p.ids
        targets[b, :n] = p.targets.next_tokens
        tw[b, :n] = 1.0 / n
        for q, tape in enumerate(p.tapes):
            tapes[b, q, : q + 1] = tape.T
        first[b, :m] = p.first_positions
        pair[b, :m, : m + 1] = p.pair_tapes
        adj = p.targets.adjacency
        for i in range(1, m + 1):
            head_m[b, i - 1, 1:i] = True
            head_t[b, i - 1, :i] = adj[i, :i]
            dep_m[b, i - 1, :i] = True
            dep_t[b, i - 1, :i] = adj[:i, i]
        cells = head_m[b].sum() + dep_m[b].sum()
        cw[b] = 1.0 / cells if cells else 0.0
        counts[b, :m] = p.targets.counts
        ww[b, :m] = 1.0 / m
    return Batch(ids, targets, tw, tapes, first, pair, head_t, dep_t, head_m, dep_m, cw, counts, ww)


# ---------------------------------------------------------------- loss


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 0.2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossOutput:
    total: Tensor
    token: Tensor
    dependency: Tensor
    count: Tensor
    scores: object  # DependencyScores, kept for teacher-forced metrics
    log_probs: Tensor


def teacher_forced(model: GiLT, batch: Batch):
    """One parallel pass: token log-probs plus edge/count scores for every word."""
    fwd = model.forward(batch.ids, batch.tapes)
    reps = model.with_root(model.word_representation(fwd.hiddens, fwd.embeddings, batch.first_positions))
    M = batch.first_positions.shape[1]
    scores = model.dependency_scores(reps, np.arange(1, M + 1), batch.pair_tapes)
    return fwd, scores


def total_loss(model: GiLT, batch: Batch, weights: LossWeights) -> LossOutput:
    """alpha * token CE + beta * edge BCE + gamma * count CE, each averaged per sentence then over the batch."""
    fwd, scores = teacher_forced(model, batch)
    B = batch.size
    token = ad.nll_from_log_probs(fwd.log_probs, batch.targets, batch.token_weights / B, reduction="sum")
    cw = batch.cell_weights[:, None, None] / B
    dep = (ad.binary_cross_entropy(scores.head_probs(), batch.head_targets, batch.head_mask * cw, "sum")
           + ad.binary_cross_entropy(scores.dep_probs(), batch.dep_targets, batch.dep_mask * cw, "sum"))
    count = ad.nll_from_log_probs(scores.count_log_probs(), batch.counts, batch.word_weights / B, reduction="sum")
    total = token * weights.alpha + dep * weights.beta + count * weights.gamma
    if not total.is_finite():
        raise TrainingError("non-finite loss")
    return LossOutput(total, token, dep, count, scores, fwd.log_probs)


def teacher_forced_metrics(model: GiLT, batch: Batch) -> dict:
    """Per-token CE and edge/count accuracies under gold structure."""
    with ad.no_grad():
        fwd, scores = teacher_forced(model, batch)
    real = batch.token_weights > 0
    lp = fwd.log_probs.data
    picked = np.take_along_axis(lp, batch.targets[..., None], axis=-1)[..., 0]
    token_ce = float(-(picked[real]).sum() / real.sum())
    hp = scores.head_probs().data >= 0.5
    dp = scores.dep_probs().data >= 0.5
    edge_hits = ((hp == (batch.head_targets > 0.5)) & batch.head_mask).sum() + \
                ((dp == (batch.dep_targets > 0.5)) & batch.dep_mask).sum()
    edge_total = batch.head_mask.sum() + batch.dep_mask.sum()
    words = batch.word_weights > 0
    pred_counts = scores.count_logits.data.argmax(-1)
    count_acc = float((pred_counts == batch.counts)[words].mean()) if words.any() else 1.0
    return {"token_ce": token_ce, "edge_acc": float(edge_hits / max(edge_total, 1)), "count_acc": count_acc,
            "tokens": int(real.sum())}


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, params, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.trainable()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.trainable()}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n, t in self.params.trainable():
            g = t.grad
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data -= lr * update


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, cosine decay to zero afterwards."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params.trainable()))
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in params.trainable():
            t.grad *= scale
    return norm


def train_step(model: GiLT, batch: Batch, optimizer: Adam, weights: LossWeights, lr: float,
               clip_norm: float = 1.0) -> dict:
    model.params.zero_grad()
    model.training = True
    try:
        out = total_loss(model, batch, weights)
    finally:
        model.training = False
    out.total.backward()
    norm = clip_gradients(model.params, clip_norm)
    optimizer.step(lr)
    return {"loss": out.total.item(), "L_tok": out.token.item(), "L_dep": out.dependency.item(),
            "L_cnt": out.count.item(), "grad_norm": norm, "lr": lr}


def check_capacity(config: GiLTConfig, examples: Sequence[CorpusExample]) -> dict:
    """Refuse to train when C or a tape cap is below the corpus maximum."""
    report = corpus_report(examples, config.tape_settings)
    caps = config.caps
    problems = []
    if report["max_count"] > config.max_count:
        problems.append(f"max gold count {report['max_count']} > C={config.max_count}")
    if report["max_degree"] > caps.degree_cap:
        problems.append(f"max degree {report['max_degree']} > degree_cap={caps.degree_cap}")
    if report["max_distance"] > caps.distance_cap:
        problems.append(f"max distance {report['max_distance']} > distance_cap={caps.distance_cap}")
    if report["max_depth"] > caps.depth_cap:
        problems.append(f"max depth {report['max_depth']} > depth_cap={caps.depth_cap}")
    if report["max_tokens"] + 1 > config.max_positions:
        problems.append(f"sentence of {report['max_tokens']} tokens exceeds max_positions")
    if problems:
        raise TrainingError("; ".join(problems))
    return report


def train(model: GiLT, examples: Sequence[CorpusExample], vocab: Vocabulary, cfg: TrainConfig,
          metrics_path=None, log_every: int = 0, progress=None) -> list[dict]:
    """Run ``cfg.steps`` Adam updates; returns the per-step metrics."""
    check_capacity(model.config, examples)
    prepared = [prepare(ex, vocab, model.config) for ex in examples]
    rng = np.random.default_rng(cfg.seed)
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma)
    opt = Adam(model.params, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, cfg.weight_decay)
    bs = min(cfg.batch_size, len(prepared))
    full = collate(prepared) if bs == len(prepared) else None
    order: list[int] = []
    history = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for step in range(cfg.steps):
            if full is not None:
                batch = full
            else:
                if len(order) < bs:
                    order.extend(rng.permutation(len(prepared)).tolist())
                idx, order = order[:bs], order[bs:]
                batch = collate([prepared[i] for i in idx])
            metrics = train_step(model, batch, opt, weights, lr_at(step, cfg), cfg.clip_norm)
            metrics["step"] = step
            history.append(metrics)
            if sink:
                sink.write(json.dumps({k: metrics[k] for k in ("step", "L_tok", "L_dep", "L_cnt", "grad_norm")}) + "\n")
            if progress and log_every and step % log_every == 0:
                progress(metrics)
    finally:
        if sink:
            sink.close()
    return history
