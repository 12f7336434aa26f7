"""Model, training and beam configuration (JSON key-value files)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from gilt.graph import FeatureCaps, FeatureWeights, TapeSettings

ABLATIONS = ("no_degree", "no_depth", "no_distance", "unweight_degree", "unweight_distance")


@dataclass(frozen=True)
class Ablation:
    no_degree: bool = False
    no_depth: bool = False
    no_distance: bool = False
    unweight_degree: bool = False
    unweight_distance: bool = False

    @classmethod
    def only(cls, name: str) -> "Ablation":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
        return cls(**{name: True})

    def active(self) -> list[str]:
        return [n for n in ABLATIONS if getattr(self, n)]


@dataclass(frozen=True)
class GiLTConfig:
    vocab_size: int
    num_layers: int = 4
    model_dim: int = 64
    tape_dim: int = 16
    heads: int = 4
    ffn_mult: int = 4
    max_count: int = 4
    m_in: int = 1
    m_out: int = 10
    degree_cap: int = 64
    distance_cap: int = 64
    depth_cap: int = 32
    infused_layers: tuple = ()  # empty means all layers
    ablation: Ablation = field(default_factory=Ablation)
    max_positions: int = 256
    dropout: float = 0.0
    init_scale: float = 0.02

    def __post_init__(self):
        if self.num_layers < 2 or self.num_layers % 2:
            raise ValueError("num_layers must be even and >= 2")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.model_dim % 2:
            raise ValueError("model_dim must be even for the sinusoid encoding")
        object.__setattr__(self, "infused_layers", tuple(int(i) for i in self.infused_layers))
        for i in self.infused_layers:
            if not 1 <= i <= self.num_layers:
                raise ValueError(f"infused layer {i} outside 1..{self.num_layers}")
        if isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", Ablation(**self.ablation))

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def infused(self) -> tuple:
        return self.infused_layers or tuple(range(1, self.num_layers + 1))

    @property
    def weights(self) -> FeatureWeights:
        return FeatureWeights(self.m_in, self.m_out)

    @property
    def caps(self) -> FeatureCaps:
        return FeatureCaps(self.degree_cap, self.distance_cap, self.depth_cap)

    @property
    def tape_settings(self) -> TapeSettings:
        a = self.ablation
        return TapeSettings(
            weights=self.weights,
            caps=self.caps,
            use_degree=not a.no_degree,
            use_distance=not a.no_distance,
            use_depth=not a.no_depth,
            weight_degree=not a.unweight_degree,
            weight_distance=not a.unweight_distance,
        )

    def with_(self, **changes) -> "GiLTConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["infused_layers"] = list(self.infused_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GiLTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "ablation" in d:
            d["ablation"] = Ablation(**d["ablation"])
        return cls(**d)


def tiny_config(vocab_size: int, **overrides) -> GiLTConfig:
    """The gradient-check configuration."""
    base = dict(num_layers=2, model_dim=16, tape_dim=8, heads=2, max_count=2,
                degree_cap=16, distance_cap=32, depth_cap=8, init_scale=0.3)
    base.update(overrides)
    return GiLTConfig(vocab_size=vocab_size, **base)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 50
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 0.2
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weight_decay: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class BeamConfig:
    beam: int = 10
    count_expansions: int | None = None  # None -> min(4, C + 1)
    temperature: float = 0.0
    sample_counts: bool = False
    conditional_mode: str = "remarginalize"  # or "reuse"

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam width must be >= 1")
        if self.count_expansions is not None and self.count_expansions < 1:
            raise ValueError("count_expansions must be >= 1")
        if self.conditional_mode not in ("remarginalize", "reuse"):
            raise ValueError(f"unknown conditional_mode {self.conditional_mode!r}")

    def expansions(self, max_count: int) -> int:
        k = min(4, max_count + 1) if self.count_expansions is None else self.count_expansions
        return max(1, min(k, max_count + 1))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
