"""Graph-infused transformer language model at desk scale.

Tokens and a word-level dependency graph are predicted jointly; degree,
distance and depth features of the growing graph are added to the attention
keys, and sentence probabilities are lower-bounded by beam marginalisation.
"""
from gilt.config import Ablation, BeamConfig, GiLTConfig, TrainConfig, tiny_config
from gilt.model import GiLT

__version__ = "0.1.0"

__all__ = ["Ablation", "BeamConfig", "GiLT", "GiLTConfig", "TrainConfig", "tiny_config", "__version__"]
