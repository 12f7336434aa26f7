"""The GiLT network.

A pre-LayerNorm transformer whose attention follows the Transformer-XL
decomposition, with the fused feature-tape embedding added to the relative
position vector of every key.  Word representations feed a biaffine edge
scorer and a dependency-count head.

Array conventions: ``B`` batch (sentences or beam hypotheses), ``T`` model
positions (position 0 is BOS), ``M`` words, ``H`` heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gilt import autodiff as ad
from gilt.autodiff import ParameterSet, Tensor
from gilt.config import GiLTConfig

NEG_INF = -1e30


def sinusoid_encoding(offset, dim: int) -> np.ndarray:
    """Interleaved sin/cos encoding; ``offset`` may be an array (encoded along a new last axis)."""
    offset = np.asarray(offset, dtype=np.float64)
    if np.any(offset < 0):
        raise ValueError("relative offsets must be non-negative")
    m = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2.0 * m / dim))
    ang = offset[..., None] * freq
    enc = np.empty(offset.shape + (dim,), dtype=np.float64)
    enc[..., 0::2] = np.sin(ang)
    enc[..., 1::2] = np.cos(ang)
    return enc


@dataclass
class LayerCache:
    """Content keys and values of all positions seen so far, one entry per layer."""

    keys: list
    values: list


@dataclass
class ForwardResult:
    log_probs: Tensor  # (B, T, V)
    hiddens: list  # block outputs, index l in 1..L (index 0 is the input embedding)
    embeddings: Tensor  # (B, T, d)
    cache: LayerCache | None = None


@dataclass
class DependencyScores:
    head_logits: Tensor  # (B, R, J): current word i heads word j  (j == i is the self pair)
    dep_logits: Tensor  # (B, R, J): word j heads current word i
    count_logits: Tensor  # (B, R, C + 1)

    def head_probs(self) -> Tensor:
        return ad.sigmoid(self.head_logits)

    def dep_probs(self) -> Tensor:
        return ad.sigmoid(self.dep_logits)

    def count_log_probs(self) -> Tensor:
        return ad.log_softmax(self.count_logits, axis=-1)


class GiLT:
    def __init__(self, config: GiLTConfig, seed: int = 0):
        self.config = config
        self.params = ParameterSet()
        self.training = False
        self._dropout_rng = np.random.default_rng(seed + 1)
        self._init_params(np.random.default_rng(seed))
        self._rel_table = sinusoid_encoding(np.arange(config.max_positions + 1), config.model_dim)

    # ------------------------------------------------------------ parameters

    def _init_params(self, rng):
        c = self.config
        d, dt, H = c.model_dim, c.tape_dim, c.heads
        p = self.params

        def lin(name, fan_in, fan_out):
            p.add(name, rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))

        def vec(name, n, value=0.0):
            p.add(name, np.full(n, value))

        p.add("tok_emb", rng.normal(0.0, c.init_scale, size=(c.vocab_size, d)))
        for l in range(1, c.num_layers + 1):
            pre = f"layer{l}."
            vec(pre + "ln1_g", d, 1.0)
            vec(pre + "ln1_b", d)
            for w in ("wq", "wkc", "wkr", "wv", "wo"):
                lin(pre + w, d, d)
            p.add(pre + "u", rng.normal(0.0, c.init_scale, size=(H, c.head_dim)))
            p.add(pre + "v", rng.normal(0.0, c.init_scale, size=(H, c.head_dim)))
            vec(pre + "ln2_g", d, 1.0)
            vec(pre + "ln2_b", d)
            lin(pre + "ff1_w", d, c.ffn_mult * d)
            vec(pre + "ff1_b", c.ffn_mult * d)
            lin(pre + "ff2_w", c.ffn_mult * d, d)
            vec(pre + "ff2_b", d)
            if l in c.infused:
                lin(pre + "fuse", 3 * dt, d)
        vec("lnf_g", d, 1.0)
        vec("lnf_b", d)
        lin("out_w", d, c.vocab_size)
        vec("out_b", c.vocab_size)
        for row, size in zip(("degree", "distance", "depth"), c.caps.table_sizes()):
            p.add(f"tape.{row}", rng.normal(0.0, c.init_scale, size=(size, dt)))
        p.add("dep.root", rng.normal(0.0, c.init_scale, size=(3 * d,)))
        lin("dep.pe_proj", 3 * dt, d)
        for role in ("par", "chd"):
            lin(f"dep.{role}1_w", 3 * d, d)
            vec(f"dep.{role}1_b", d)
            lin(f"dep.{role}2_w", d, d)
            vec(f"dep.{role}2_b", d)
        lin("dep.w_p", d, d)
        lin("cnt.w_s", d, d)
        lin("cnt.w_a", d, c.max_count + 1)
        vec("cnt.b_a", c.max_count + 1)

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return self.params.num_values()

    # ------------------------------------------------------------ tapes

    def tape_embedding(self, tapes: np.ndarray) -> Tensor:
        """Concatenated degree/distance/depth embeddings, ``(..., 3) -> (..., 3 * tape_dim)``."""
        tapes = np.asarray(tapes)
        return ad.concat([ad.embedding(self[f"tape.{row}"], tapes[..., i])
                          for i, row in enumerate(("degree", "distance", "depth"))], axis=-1)

    def tape_key_bias(self, tapes: np.ndarray, layer: int, embedded: Tensor | None = None) -> Tensor | None:
        """Fused tape feature added to attention keys at ``layer``; ``None`` for non-infused layers."""
        if layer not in self.config.infused:
            return None
        if embedded is None:
            embedded = self.tape_embedding(tapes)
        return embedded @ self[f"layer{layer}.fuse"]

    # ------------------------------------------------------------ transformer

    def _attention(self, layer: int, x: Tensor, qpos: np.ndarray, keys: Tensor, values: Tensor,
                   e: Tensor | None, kpos: np.ndarray) -> Tensor:
        c = self.config
        pre = f"layer{layer}."
        B, Tq, _ = x.shape
        H, dh = c.heads, c.head_dim
        q = (x @ self[pre + "wq"]).reshape(B, Tq, H, dh)
        content = ad.einsum("bqhd,bkhd->bhqk", q + self[pre + "u"], keys)
        wkr = self[pre + "wkr"].reshape(c.model_dim, H, dh)
        q_rel = ad.einsum("bqhe,dhe->bqhd", q + self[pre + "v"], wkr)
        offsets = qpos[:, None] - kpos[None, :]
        rel = Tensor(self._rel_table[np.maximum(offsets, 0)])
        if e is None:
            position = ad.einsum("bqhd,qkd->bhqk", q_rel, rel)
        else:
            position = ad.einsum("bqhd,bqkd->bhqk", q_rel, rel + e)
        scores = (content + position) * (1.0 / np.sqrt(dh))
        causal = offsets >= 0
        attn = ad.softmax(ad.where(causal, scores, NEG_INF), axis=-1)
        attn = ad.dropout(attn, c.dropout, self._dropout_rng, self.training)
        out = ad.einsum("bhqk,bkhd->bqhd", attn, values).reshape(B, Tq, c.model_dim)
        return out @ self[pre + "wo"]

    def _block(self, layer: int, h: Tensor, qpos: np.ndarray, e: Tensor | None,
               cache: LayerCache | None) -> Tensor:
        c = self.config
        pre = f"layer{layer}."
        B, Tq, _ = h.shape
        x = ad.layer_norm(h, self[pre + "ln1_g"], self[pre + "ln1_b"])
        keys = (x @ self[pre + "wkc"]).reshape(B, Tq, c.heads, c.head_dim)
        values = (x @ self[pre + "wv"]).reshape(B, Tq, c.heads, c.head_dim)
        if cache is not None:
            i = layer - 1
            if cache.keys[i] is not None:
                keys = ad.concat([cache.keys[i], keys], axis=1)
                values = ad.concat([cache.values[i], values], axis=1)
            cache.keys[i], cache.values[i] = keys, values
        kpos = np.arange(keys.shape[1])
        h = h + ad.dropout(self._attention(layer, x, qpos, keys, values, e, kpos),
                           c.dropout, self._dropout_rng, self.training)
        y = ad.layer_norm(h, self[pre + "ln2_g"], self[pre + "ln2_b"])
        y = ad.gelu(y @ self[pre + "ff1_w"] + self[pre + "ff1_b"]) @ self[pre + "ff2_w"] + self[pre + "ff2_b"]
        return h + ad.dropout(y, c.dropout, self._dropout_rng, self.training)

    def forward(self, ids: np.ndarray, tapes: np.ndarray | None, positions: np.ndarray | None = None,
                cache: LayerCache | None = None) -> ForwardResult:
        """Causal forward.

        ``ids`` is (B, Tq).  ``tapes`` is (B, Tq, Tk, 3): row q holds the tape of
        query position ``positions[q]`` over key positions 0..Tk-1 (entries past the
        query are ignored).  With a ``cache`` the queries are appended after the
        cached positions, which is how incremental decoding runs.
        """
        c = self.config
        ids = np.asarray(ids)
        B, Tq = ids.shape
        if positions is None:
            start = 0
            if cache is not None and cache.keys[0] is not None:
                start = cache.keys[0].shape[1]
            positions = np.arange(start, start + Tq)
        positions = np.asarray(positions)
        if positions.max(initial=0) > c.max_positions:
            raise ValueError(f"sequence longer than max_positions={c.max_positions}")
        if tapes is None:
            raise ValueError("a feature tape is required for every query position")
        tapes = np.asarray(tapes)
        if tapes.shape[:2] != (B, Tq) or tapes.shape[2] != positions[-1] + 1:
            raise ValueError(f"tape shape {tapes.shape} does not match queries {(B, Tq)} "
                             f"over {positions[-1] + 1} keys")
        emb = ad.embedding(self["tok_emb"], ids)
        h = ad.dropout(emb, c.dropout, self._dropout_rng, self.training)
        embedded = self.tape_embedding(tapes) if c.infused else None
        hiddens = [emb]
        for l in range(1, c.num_layers + 1):
            e = self.tape_key_bias(tapes, l, embedded)
            h = self._block(l, h, positions, e, cache)
            hiddens.append(h)
        y = ad.layer_norm(h, self["lnf_g"], self["lnf_b"])
        logits = y @ self["out_w"] + self["out_b"]
        return ForwardResult(ad.log_softmax(logits, axis=-1), hiddens, emb, cache)

    def new_cache(self) -> LayerCache:
        L = self.config.num_layers
        return LayerCache([None] * L, [None] * L)

    # ------------------------------------------------------------ dependency heads

    def word_representation(self, hiddens: list, embeddings: Tensor, first_positions: np.ndarray) -> Tensor:
        """o_i for words whose first token sits at ``first_positions`` (B, W) -> (B, W, 3d).

        Reads the middle and penultimate layers at the previous position plus the
        first token's input embedding; nothing at or after that token's forward pass.
        """
        L = self.config.num_layers
        first_positions = np.asarray(first_positions)
        if np.any(first_positions < 1):
            raise ValueError("words start at position >= 1 (position 0 is BOS)")
        b = np.arange(first_positions.shape[0])[:, None]
        prev = first_positions - 1
        return ad.concat([hiddens[L // 2][b, prev], hiddens[L - 1][b, prev],
                          embeddings[b, first_positions]], axis=-1)

    def with_root(self, word_reprs: Tensor) -> Tensor:
        """Prepend the learnable root representation: (B, W, 3d) -> (B, W + 1, 3d)."""
        B = word_reprs.shape[0]
        root = self["dep.root"].reshape(1, 1, -1) * np.ones((B, 1, 1))
        return ad.concat([root, word_reprs], axis=1)

    def pair_position_embedding(self, rows: np.ndarray, pair_tapes: np.ndarray) -> Tensor:
        """pe for (current word rows[r], word j): sinusoid of |i - j| plus projected tape embedding."""
        J = pair_tapes.shape[2]
        offsets = np.abs(np.asarray(rows)[:, None] - np.arange(J)[None, :])
        sin = Tensor(self._rel_table[offsets])  # (R, J, d)
        return sin + self.tape_embedding(pair_tapes) @ self["dep.pe_proj"]

    def dependency_scores(self, reps: Tensor, rows: np.ndarray, pair_tapes: np.ndarray) -> DependencyScores:
        """Biaffine edge logits and count logits.

        ``reps`` (B, J, 3d) includes the root at index 0.  ``rows`` (R,) are current
        word indices (each < J); ``pair_tapes`` (B, R, J, 3) hold the feature triple
        of word j as seen from word rows[r] before its edges are added.  Columns
        j > rows[r] are padding and must be masked by the caller.
        """
        c = self.config
        rows = np.asarray(rows)
        B, J, _ = reps.shape
        R = rows.shape[0]
        a_par = ad.gelu(reps @ self["dep.par1_w"] + self["dep.par1_b"])
        a_chd = ad.gelu(reps @ self["dep.chd1_w"] + self["dep.chd1_b"])
        pe = self.pair_position_embedding(rows, pair_tapes)  # (B, R, J, d)
        par = ad.gelu((a_par.reshape(B, 1, J, -1) + pe) @ self["dep.par2_w"] + self["dep.par2_b"])
        chd = ad.gelu((a_chd.reshape(B, 1, J, -1) + pe) @ self["dep.chd2_w"] + self["dep.chd2_b"])
        bi = np.arange(B)[:, None]
        ri = np.arange(R)[None, :]
        par_i = par[bi, ri, rows[None, :]]  # (B, R, d)
        chd_i = chd[bi, ri, rows[None, :]]
        wp = self["dep.w_p"]
        head_logits = ad.einsum("brd,brjd->brj", par_i @ wp, chd)
        dep_logits = ad.einsum("brjd,brd->brj", par, chd_i @ ad.transpose(wp))
        cols = np.arange(J)[None, :]
        upto = (cols <= rows[:, None]).astype(np.float64)[None, :, :, None]
        before = (cols < rows[:, None]).astype(np.float64)[None, :, :, None]
        ws_t = ad.transpose(self["cnt.w_s"])
        s = par_i * ((chd * upto).sum(axis=2) @ ws_t) + (par * before).sum(axis=2) * (chd_i @ ws_t)
        scale = 1.0 / np.sqrt(np.maximum(2 * rows - 1, 1)).reshape(1, R, 1)
        count_logits = (s * scale) @ self["cnt.w_a"] + self["cnt.b_a"]
        return DependencyScores(head_logits, dep_logits, count_logits)
