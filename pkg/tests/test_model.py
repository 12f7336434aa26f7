import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gilt import autodiff as ad
from gilt.autodiff import Tensor
from gilt.checkpoint import load_checkpoint, save_checkpoint
from gilt.config import Ablation, GiLTConfig, tiny_config
from gilt.corpus import Tokenizer, Vocabulary
from gilt.graph import WordAlignment, WordGraph, build_feature_tape
from gilt.model import GiLT, sinusoid_encoding
from oracles import naive_txl_log_probs

V = 11


def _model(seed=0, **kw):
    return GiLT(tiny_config(V, **kw), seed=seed)


def _random_tapes(rng, B, T, caps=(16, 32, 8)):
    tapes = np.zeros((B, T, T, 3), dtype=np.int64)
    for i, cap in enumerate(caps):
        tapes[..., i] = rng.integers(0, cap + 2, size=(B, T, T))
    return tapes


def _zero_fusion(m):
    for name, t in m.params.items():
        if name.endswith(".fuse"):
            t.data[...] = 0.0


def _forward(m, ids, tapes):
    with ad.no_grad():
        return m.forward(np.asarray(ids), tapes)


# ---------------------------------------------------------------- encodings


def test_sinusoid_at_zero_and_range():
    enc = sinusoid_encoding(0, 16)
    assert np.all(enc[0::2] == 0.0) and np.all(enc[1::2] == 1.0)
    many = sinusoid_encoding(np.arange(500), 16)
    assert many.shape == (500, 16) and np.abs(many).max() <= 1.0


def test_sinusoid_rejects_negative():
    with pytest.raises(ValueError):
        sinusoid_encoding(-1, 8)


def test_config_invariants():
    with pytest.raises(ValueError):
        GiLTConfig(vocab_size=5, num_layers=3)
    with pytest.raises(ValueError):
        GiLTConfig(vocab_size=5, model_dim=10, heads=4)
    with pytest.raises(ValueError):
        GiLTConfig(vocab_size=5, infused_layers=(9,))
    cfg = GiLTConfig(vocab_size=5, ablation=Ablation(no_distance=True))
    assert GiLTConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- forward


def test_log_probs_normalised():
    rng = np.random.default_rng(0)
    m = _model()
    out = _forward(m, rng.integers(0, V, size=(2, 6)), _random_tapes(rng, 2, 6))
    lse = np.log(np.exp(out.log_probs.data).sum(-1))
    assert np.abs(lse).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10 ** 6))
def test_causality(T, seed):
    rng = np.random.default_rng(seed)
    m = _model(seed=1)
    ids = rng.integers(0, V, size=(1, T))
    tapes = _random_tapes(rng, 1, T)
    cut = int(rng.integers(1, T))
    ids2, tapes2 = ids.copy(), tapes.copy()
    ids2[0, cut:] = rng.integers(0, V, size=T - cut)
    tapes2[0, cut:] = _random_tapes(rng, 1, T)[0, cut:]
    a = _forward(m, ids, tapes).log_probs.data
    b = _forward(m, ids2, tapes2).log_probs.data
    assert np.array_equal(a[0, :cut], b[0, :cut])


def test_tape_entries_past_the_query_are_ignored():
    rng = np.random.default_rng(3)
    m = _model()
    ids = rng.integers(0, V, size=(1, 5))
    tapes = _random_tapes(rng, 1, 5)
    noisy = tapes.copy()
    for q in range(5):
        noisy[0, q, q + 1:] = 0
    assert np.array_equal(_forward(m, ids, tapes).log_probs.data, _forward(m, ids, noisy).log_probs.data)


def test_txl_degeneracy_against_naive_reference():
    rng = np.random.default_rng(0)
    m = _model(seed=5, ablation=Ablation(True, True, True))
    _zero_fusion(m)
    ids = rng.integers(0, V, size=6)
    tapes = _random_tapes(rng, 1, 6)
    got = _forward(m, ids[None], tapes).log_probs.data[0]
    ref = naive_txl_log_probs(m.params.state(), ids, m.config.num_layers, m.config.heads)
    assert np.abs(got - ref).max() < 1e-10


def test_tape_changes_output_when_fusion_is_live():
    rng = np.random.default_rng(0)
    m = _model(seed=5)
    ids = rng.integers(0, V, size=(1, 5))
    tapes = _random_tapes(rng, 1, 5)
    other = tapes.copy()
    other[0, 4, 2, 0] = (tapes[0, 4, 2, 0] + 1) % 18
    a = _forward(m, ids, tapes).log_probs.data
    b = _forward(m, ids, other).log_probs.data
    assert np.array_equal(a[0, :4], b[0, :4])
    assert not np.allclose(a[0, 4], b[0, 4])


def test_key_bias_locality():
    rng = np.random.default_rng(0)
    m = _model()
    tape = _random_tapes(rng, 1, 6)[0, 5]
    base = m.tape_key_bias(tape, 1).data
    changed = tape.copy()
    changed[3, 1] = (changed[3, 1] + 1) % 34
    diff = np.abs(m.tape_key_bias(changed, 1).data - base).sum(-1)
    assert diff[3] > 0 and np.all(np.delete(diff, 3) == 0)


def test_key_bias_same_word_rows_identical():
    m = _model()
    g = WordGraph(2, frozenset({(0, 2), (2, 1)}))
    align = WordAlignment((1, 1, 2))
    tape = build_feature_tape(g, align, 3, m.config.tape_settings)
    e = m.tape_key_bias(tape.T, 1).data
    assert np.array_equal(e[1], e[2])


def test_key_bias_constant_when_all_rows_disabled():
    m = _model(ablation=Ablation(True, True, True))
    g = WordGraph(3, frozenset({(0, 3), (3, 1), (1, 2)}))
    align = WordAlignment((1, 2, 3))
    tape = build_feature_tape(g, align, 3, m.config.tape_settings)
    e = m.tape_key_bias(tape.T, 2).data
    expected = m.tape_embedding(np.zeros((1, 3), dtype=np.int64)).data @ m["layer2.fuse"].data
    assert np.allclose(e, expected, atol=0)


def test_non_infused_layer_has_no_fusion():
    m = GiLT(tiny_config(V, infused_layers=(2,)))
    assert "layer1.fuse" not in m.params and "layer2.fuse" in m.params
    assert m.tape_key_bias(np.zeros((2, 3), dtype=np.int64), 1) is None


def test_incremental_matches_parallel():
    rng = np.random.default_rng(7)
    m = _model(seed=2)
    T = 5
    ids = rng.integers(0, V, size=(2, T))
    tapes = _random_tapes(rng, 2, T)
    for q in range(T):
        tapes[:, q, q + 1:] = 0
    full = _forward(m, ids, tapes)
    cache = m.new_cache()
    steps = []
    with ad.no_grad():
        for p in range(T):
            out = m.forward(ids[:, p:p + 1], tapes[:, p:p + 1, : p + 1], positions=np.array([p]), cache=cache)
            steps.append(out.log_probs.data[:, 0])
    assert np.abs(np.stack(steps, 1) - full.log_probs.data).max() < 1e-10


def test_forward_rejects_bad_tape():
    m = _model()
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3), dtype=np.int64), None)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 3), dtype=np.int64), np.zeros((1, 3, 2, 3), dtype=np.int64))
    with pytest.raises(IndexError):
        m.forward(np.zeros((1, 2), dtype=np.int64), np.full((1, 2, 2, 3), 99))


# ---------------------------------------------------------------- word representations


def test_word_representation_reads_only_the_past():
    rng = np.random.default_rng(1)
    m = _model()
    T = 6
    ids = rng.integers(0, V, size=(1, T))
    tapes = _random_tapes(rng, 1, T)
    first = np.array([[1, 3, 4]])
    d = m.config.model_dim
    out = _forward(m, ids, tapes)
    reps = m.word_representation(out.hiddens, out.embeddings, first).data
    # word 2 starts at position 3: edit everything from position 3 on except its embedding
    ids2, tapes2 = ids.copy(), tapes.copy()
    ids2[0, 4:] = (ids[0, 4:] + 1) % V
    tapes2[0, 3:] = _random_tapes(rng, 1, T)[0, 3:]
    out2 = _forward(m, ids2, tapes2)
    reps2 = m.word_representation(out2.hiddens, out2.embeddings, first).data
    assert np.array_equal(reps[0, 1], reps2[0, 1])
    # the first word reads BOS states at position 0
    L = m.config.num_layers
    assert np.array_equal(reps[0, 0, :d], out.hiddens[L // 2].data[0, 0])
    assert np.array_equal(reps[0, 0, 2 * d:], m["tok_emb"].data[ids[0, 1]])


def test_root_is_learnable_vector():
    m = _model()
    reps = m.with_root(Tensor(np.ones((2, 3, 3 * m.config.model_dim)))).data
    assert np.array_equal(reps[0, 0], m["dep.root"].data) and np.array_equal(reps[1, 0], m["dep.root"].data)


def test_word_representation_rejects_bos_start():
    m = _model()
    with pytest.raises(ValueError):
        m.word_representation([None] * 3, None, np.array([[0]]))


# ---------------------------------------------------------------- edge and count heads


def _naive_scores(m, reps, i, pair_tape):
    """Edge and count logits for word i with explicit per-pair loops."""
    P = {k: v for k, v in m.params.state().items()}
    d = m.config.model_dim

    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))

    def embed(triple):
        rows = [P["tape.degree"][triple[0]], P["tape.distance"][triple[1]], P["tape.depth"][triple[2]]]
        return np.concatenate(rows) @ P["dep.pe_proj"]

    par, chd = [], []
    for j in range(i + 1):
        pe = sinusoid_encoding(abs(i - j), d) + embed(pair_tape[j])
        par.append(gelu((gelu(reps[j] @ P["dep.par1_w"] + P["dep.par1_b"]) + pe) @ P["dep.par2_w"] + P["dep.par2_b"]))
        chd.append(gelu((gelu(reps[j] @ P["dep.chd1_w"] + P["dep.chd1_b"]) + pe) @ P["dep.chd2_w"] + P["dep.chd2_b"]))
    head = np.array([par[i] @ P["dep.w_p"] @ chd[j] for j in range(i + 1)])
    dep = np.array([par[j] @ P["dep.w_p"] @ chd[i] for j in range(i + 1)])
    Ws = P["cnt.w_s"]
    s = sum(par[i] * (Ws @ chd[j]) for j in range(i + 1)) + sum(par[j] * (Ws @ chd[i]) for j in range(i))
    count = (s / math.sqrt(2 * i - 1)) @ P["cnt.w_a"] + P["cnt.b_a"]
    return head, dep, count


@pytest.mark.parametrize("i", [1, 2, 3])
def test_dependency_scores_against_loops(i):
    rng = np.random.default_rng(i)
    m = _model(seed=4)
    d = m.config.model_dim
    reps = rng.normal(size=(1, 4, 3 * d))
    pair = np.zeros((1, 1, 4, 3), dtype=np.int64)
    pair[0, 0, 1:i + 1] = rng.integers(0, 9, size=(i, 3))
    with ad.no_grad():
        sc = m.dependency_scores(Tensor(reps), np.array([i]), pair)
    head, dep, count = _naive_scores(m, reps[0], i, pair[0, 0])
    assert np.allclose(sc.head_logits.data[0, 0, : i + 1], head, atol=1e-12)
    assert np.allclose(sc.dep_logits.data[0, 0, : i + 1], dep, atol=1e-12)
    assert np.allclose(sc.count_logits.data[0, 0], count, atol=1e-12)


def test_scores_for_one_row_ignore_later_columns():
    rng = np.random.default_rng(0)
    m = _model()
    reps = rng.normal(size=(1, 4, 3 * m.config.model_dim))
    pair = np.zeros((1, 1, 4, 3), dtype=np.int64)
    with ad.no_grad():
        a = m.dependency_scores(Tensor(reps), np.array([2]), pair)
        reps[0, 3] += 1.0
        b = m.dependency_scores(Tensor(reps), np.array([2]), pair)
    assert np.array_equal(a.head_logits.data[..., :3], b.head_logits.data[..., :3])
    assert np.array_equal(a.count_logits.data, b.count_logits.data)


def test_probability_ranges_and_degenerate_params():
    rng = np.random.default_rng(0)
    m = _model()
    reps = Tensor(rng.normal(size=(2, 4, 3 * m.config.model_dim)))
    rows = np.array([1, 2, 3])
    pair = np.zeros((2, 3, 4, 3), dtype=np.int64)
    with ad.no_grad():
        sc = m.dependency_scores(reps, rows, pair)
        hp, dp = sc.head_probs().data, sc.dep_probs().data
        assert np.all((hp > 0) & (hp < 1)) and np.all((dp > 0) & (dp < 1))
        pi = np.exp(sc.count_log_probs().data)
        assert np.abs(pi.sum(-1) - 1).max() < 1e-12
        m["dep.w_p"].data[...] = 0.0
        m["cnt.w_a"].data[...] = 0.0
        m["cnt.b_a"].data[...] = 0.0
        sc = m.dependency_scores(reps, rows, pair)
    assert np.all(sc.head_probs().data == 0.5) and np.all(sc.dep_probs().data == 0.5)
    assert np.allclose(np.exp(sc.count_log_probs().data), 1.0 / (m.config.max_count + 1), atol=1e-15)


# ---------------------------------------------------------------- parameters and checkpoints


def test_parameter_shapes():
    m = _model()
    c = m.config
    assert m["dep.root"].shape == (3 * c.model_dim,)
    assert m["tape.distance"].shape == (c.distance_cap + 2, c.tape_dim)
    assert m["layer1.fuse"].shape == (3 * c.tape_dim, c.model_dim)
    assert m["cnt.w_a"].shape == (c.model_dim, c.max_count + 1)


def test_same_seed_same_parameters():
    a, b = _model(seed=9), _model(seed=9)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.params)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vocab = Vocabulary([f"t{i}" for i in range(V - 3)])
    m = _model(seed=3, ablation=Ablation(no_depth=True))
    save_checkpoint(tmp_path / "ck", m, vocab, Tokenizer(frozenset({"a"})), {"note": 1})
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.model.config == m.config and ck.meta == {"note": 1}
    assert ck.vocab.itos == vocab.itos and ck.tokenizer == Tokenizer(frozenset({"a"}))
    ids = rng.integers(0, V, size=(1, 4))
    tapes = _random_tapes(rng, 1, 4)
    assert np.array_equal(_forward(m, ids, tapes).log_probs.data, _forward(ck.model, ids, tapes).log_probs.data)
