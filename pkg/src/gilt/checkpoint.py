"""Checkpoint directories: config.json, params.bin, vocab.json and tokenizer.json."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from gilt.autodiff import load_tensors, save_tensors
from gilt.config import GiLTConfig, read_json, write_json
from gilt.corpus import Tokenizer, Vocabulary
from gilt.model import GiLT


@dataclass
class Checkpoint:
    model: GiLT
    vocab: Vocabulary
    tokenizer: Tokenizer
    meta: dict


def save_checkpoint(directory, model: GiLT, vocab: Vocabulary, tokenizer: Tokenizer,
                    meta: dict | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"model": model.config.to_dict(), "meta": meta or {}})
    save_tensors(out / "params.bin", model.params.state())
    write_json(out / "vocab.json", vocab.to_json())
    write_json(out / "tokenizer.json", tokenizer.to_json())
    return out


def load_checkpoint(directory) -> Checkpoint:
    src = Path(directory)
    if not (src / "config.json").exists():
        raise FileNotFoundError(f"{src}: no config.json, not a checkpoint directory")
    cfg = read_json(src / "config.json")
    model = GiLT(GiLTConfig.from_dict(cfg["model"]))
    model.params.load_state(load_tensors(src / "params.bin"))
    vocab = Vocabulary.from_json(read_json(src / "vocab.json"))
    if len(vocab) != model.config.vocab_size:
        raise ValueError(f"{src}: vocabulary has {len(vocab)} entries, model expects {model.config.vocab_size}")
    tokenizer = Tokenizer.from_json(read_json(src / "tokenizer.json"))
    return Checkpoint(model, vocab, tokenizer, cfg.get("meta", {}))
