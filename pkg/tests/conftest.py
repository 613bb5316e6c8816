"""Shared fixtures: a small right-skewed PCFG for synthetic treebanks."""

import random

import pytest

from sydlm.corpus import PreprocessRules, preprocess_corpus
from sydlm.trees import Tree

# expansion rules: nonterminal -> [(probability, rhs symbols)]
RULES = {
    "S": [(1.0, ("NP", "VP"))],
    "NP": [(0.40, ("DT", "NN")),
           (0.25, ("NN",)),
           (0.20, ("DT", "JJ", "NN")),
           (0.15, ("NP", "PP"))],
    "VP": [(0.45, ("VBZ", "NP")),
           (0.20, ("VBZ", "NP", "PP")),
           (0.20, ("MD", "VB", "NP")),
           (0.15, ("VBZ",))],
    "PP": [(1.0, ("IN", "NP"))],
}

WORDS = {
    "DT": ["the", "a"],
    "NN": ["cat", "dog", "bird", "fish", "man", "woman", "tree", "car", "house", "road"],
    "JJ": ["big", "small", "red", "old"],
    "VBZ": ["sees", "likes", "finds", "eats", "wants"],
    "VB": ["see", "like", "find", "eat", "want"],
    "MD": ["can", "will", "must"],
    "IN": ["in", "on", "near", "under"],
}

# non-recursive fallbacks used once the depth cap is hit
SAFE = {"NP": ("DT", "NN"), "VP": ("VBZ",), "PP": ("IN", "NN"), "S": ("NP", "VP")}


def pcfg_tree(rng: random.Random, symbol: str = "S", depth: int = 0) -> Tree:
    if symbol in WORDS:
        return Tree(label=symbol, token=rng.choice(WORDS[symbol]))
    if depth >= 6:
        rhs = SAFE[symbol]
    else:
        roll = rng.random()
        acc = 0.0
        rhs = RULES[symbol][-1][1]
        for prob, cand in RULES[symbol]:
            acc += prob
            if roll < acc:
                rhs = cand
                break
    return Tree(label=symbol, children=[pcfg_tree(rng, s, depth + 1) for s in rhs])


def pcfg_treebank(n_sentences: int, seed: int, max_words: int = 12) -> list:
    rng = random.Random(seed)
    trees = []
    while len(trees) < n_sentences:
        tree = pcfg_tree(rng)
        if tree.n_leaves() <= max_words:
            trees.append(tree)
    return trees


def pcfg_corpus(n_sentences: int, seed: int, mode: str = "concat", vocab_max_size: int = 60):
    trees = pcfg_treebank(n_sentences, seed)
    rules = PreprocessRules(vocab_max_size=vocab_max_size, mode=mode)
    return preprocess_corpus(trees, rules)


def repeated_corpus(n_unique: int, total_tokens: int, seed: int, mode: str = "concat"):
    """A memorizable corpus: n_unique sentences cycled until total_tokens."""
    uniq = []
    rng = random.Random(seed)
    seen = set()
    while len(uniq) < n_unique:
        tree = pcfg_tree(rng)
        key = tuple(tree.tokens())
        if 4 <= len(key) <= 9 and key not in seen:
            seen.add(key)
            uniq.append(tree)
    trees = []
    count = 0
    i = 0
    while count < total_tokens:
        tree = uniq[i % n_unique]
        trees.append(tree)
        count += tree.n_leaves() + (1 if mode == "concat" else 0)
        i += 1
    rules = PreprocessRules(vocab_max_size=60, mode=mode)
    return preprocess_corpus(trees, rules)


@pytest.fixture(scope="session")
def tiny_corpus():
    return pcfg_corpus(24, seed=11)


@pytest.fixture(scope="session")
def tiny_corpus_sepsent():
    return pcfg_corpus(24, seed=11, mode="sepsent")
