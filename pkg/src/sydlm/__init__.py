"""Syntactic-distance language modeling toolkit."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .corpus import Corpus, PreprocessRules, Vocab, preprocess_corpus
from .distance import (
    DistanceSeq,
    distances_to_tree_biased,
    distances_to_tree_unbiased,
    tree_to_distances,
    validate_heights,
)
from .models import build_model
from .trees import Tree, binarize_right, parse_bracketed, prune_leaves, random_binary_tree, render_bracketed

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "Corpus",
    "PreprocessRules",
    "Vocab",
    "preprocess_corpus",
    "DistanceSeq",
    "tree_to_distances",
    "distances_to_tree_unbiased",
    "distances_to_tree_biased",
    "validate_heights",
    "build_model",
    "Tree",
    "parse_bracketed",
    "render_bracketed",
    "prune_leaves",
    "binarize_right",
    "random_binary_tree",
    "__version__",
]
